"""Remote providers against a throwaway local HTTP server."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from inquire.arena import ChatEndpoint, RemoteRealizer, RemoteResponder
from inquire.corpus import ProviderError, RemoteEmbedder, Utterance
from inquire.rewards import RemoteSimilarity, lexical_similarity


class Handler(BaseHTTPRequestHandler):
    responses: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, dict(self.headers), body))
        status, payload = type(self).responses.pop(0) if type(self).responses else (200, {})
        raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    Handler.responses, Handler.seen = [], []
    srv = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", Handler
    srv.shutdown()
    srv.server_close()


def test_remote_embedder(server):
    url, h = server
    h.responses.append((200, {"embeddings": [[0.1, 0.2, 0.3], [1.0, 0.0, 0.0]]}))
    emb = RemoteEmbedder(3, model="m", url=url, api_key="k")
    out = emb.embed(["a", "b"])
    assert np.allclose(out, [[0.1, 0.2, 0.3], [1.0, 0.0, 0.0]])
    _, headers, body = h.seen[0]
    assert body == {"model": "m", "input": ["a", "b"]}
    assert headers["Authorization"] == "Bearer k"


def test_remote_embedder_retries_then_succeeds(server):
    url, h = server
    h.responses += [(500, {}), (200, {"embeddings": [[1.0, 2.0]]})]
    emb = RemoteEmbedder(2, url=url, retries=1, backoff=0.0)
    assert emb.embed(["x"]).shape == (1, 2)
    assert len(h.seen) == 2


def test_remote_embedder_wrong_shape(server):
    url, h = server
    h.responses.append((200, {"embeddings": [[1.0]]}))
    with pytest.raises(ProviderError) as err:
        RemoteEmbedder(2, url=url).embed(["x"])
    assert not err.value.retriable


def test_remote_embedder_unreachable():
    with pytest.raises(ProviderError):
        RemoteEmbedder(2, url="http://127.0.0.1:9", retries=0, timeout=1).embed(["x"])


def test_remote_embedder_needs_url(monkeypatch):
    monkeypatch.delenv("INQUIRE_EMBED_URL", raising=False)
    with pytest.raises(ProviderError):
        RemoteEmbedder(2)


def test_remote_similarity_and_fallback(server):
    url, h = server
    h.responses += [(200, {"score": 3.5}), (200, {"nope": 1})]
    sim = RemoteSimilarity(url=url)
    assert sim("a b", "a c") == 3.5
    assert h.seen[0][2] == {"text_a": "a b", "text_b": "a c"}
    assert sim("a b", "a c") == lexical_similarity("a b", "a c")
    assert sim.fallbacks == 1


def test_remote_similarity_without_endpoint(monkeypatch):
    monkeypatch.delenv("INQUIRE_SIMILARITY_URL", raising=False)
    assert RemoteSimilarity()("x y", "x y") == pytest.approx(5.0)


def test_chat_endpoint_roundtrip(server, cases, tree):
    url, h = server
    h.responses += [(200, {"text": " What does the rule require? "}), (200, {"text": "It requires a permit."})]
    ep = ChatEndpoint(url=url, model="chat", api_key="secret")
    path = tree.full_paths()[0]
    real = RemoteRealizer(ep).realize(tree, path, cases[0], 0, cases[0].context(0))
    assert real.text == "What does the rule require?"
    assert real.target in cases[0].topics
    reply = RemoteResponder(ep).respond(tree, path, cases[0], 0, Utterance("justice", real.text),
                                        cases[0].context(0))
    assert reply.text == "It requires a permit." and reply.tags == ()
    body = h.seen[1][2]
    assert body["model"] == "chat"
    assert body["messages"][-1] == {"role": "user", "content": "What does the rule require?"}


@pytest.mark.parametrize("status,payload", [(200, {"text": ""}), (200, b"not json"), (200, {"x": 1})])
def test_chat_endpoint_bad_payloads(server, status, payload):
    url, h = server
    h.responses.append((status, payload))
    with pytest.raises(ProviderError):
        ChatEndpoint(url=url).complete([{"role": "user", "content": "hi"}])


def test_chat_endpoint_unreachable_and_unset(monkeypatch):
    with pytest.raises(ProviderError):
        ChatEndpoint(url="http://127.0.0.1:9", timeout=1).complete([])
    monkeypatch.delenv("INQUIRE_CHAT_URL", raising=False)
    with pytest.raises(ProviderError):
        ChatEndpoint().complete([])
