import threading

import pytest

from hmrag.gateway import (
    CallLog,
    ChatTurn,
    HashingEmbeddingBackend,
    ModelGateway,
    ScriptedChatBackend,
)
from hmrag.templates import TemplateSet


class ConstantChatBackend:
    """Returns the same text for every turn list; counts calls per role-agnostic."""

    def __init__(self, text="ok"):
        self.text = text
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, turns, params):
        with self._lock:
            self.calls += 1
        return self.text


class EchoChatBackend:
    """Echoes the last user turn, useful when the prompt itself is the assertion."""

    def complete(self, turns, params):
        return turns[-1].content


class FlakyChatBackend:
    """Fails `failures` times with the given exception, then answers."""

    def __init__(self, failures, exc_factory, text="recovered"):
        self.remaining = failures
        self.exc_factory = exc_factory
        self.text = text
        self.attempts = 0

    def complete(self, turns, params):
        self.attempts += 1
        if self.remaining > 0:
            self.remaining -= 1
            raise self.exc_factory()
        return self.text


@pytest.fixture
def templates():
    return TemplateSet()


@pytest.fixture
def hashing_backend():
    return HashingEmbeddingBackend(dim=8, seed=7)


@pytest.fixture
def call_log():
    return CallLog()


def make_gateway(chat=None, embedding=None, caption=None, lightweight=None,
                 expert=None, call_log=None):
    return ModelGateway(
        chat=chat or ConstantChatBackend(),
        embedding=embedding,
        caption=caption,
        lightweight_chat=lightweight,
        expert_chat=expert,
        call_log=call_log,
    )


def user_turns(content):
    return [ChatTurn("user", content)]


def scripted(*entries):
    backend = ScriptedChatBackend()
    for turns, response in entries:
        backend.add(turns, response)
    return backend
