"""Autoregressive token policy with a value head.

The next-token distribution conditions on the last ``window`` tokens:

    x   = concat(embedding[context])            (window * embed_dim)
    h   = tanh(x @ W1 + b1)                     (hidden)
    z   = h @ W2 + b2                           (vocab logits)
    V   = h @ wv + bv                           (scalar value)

Gradients are written out by hand; everything runs in float64.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, EncodingError, NumericError, ShapeError
from .vocab import Vocabulary

CHECKPOINT_FORMAT = "starpo-policy"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("emb", "W1", "b1", "W2", "b2", "wv", "bv")


class Gradient:
    """Parameter-shaped accumulator; merging is plain addition."""

    def __init__(self, arrays: dict[str, np.ndarray], count: int = 0):
        self.arrays = arrays
        self.count = count

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "Gradient":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __add__(self, other: "Gradient") -> "Gradient":
        if self.arrays.keys() != other.arrays.keys():
            raise ShapeError("gradient layouts differ")
        return Gradient({k: self.arrays[k] + other.arrays[k] for k in self.arrays}, self.count + other.count)

    def __iadd__(self, other: "Gradient") -> "Gradient":
        for k, v in other.arrays.items():
            if self.arrays[k].shape != v.shape:
                raise ShapeError(f"gradient shape mismatch on {k}")
            self.arrays[k] += v
        self.count += other.count
        return self

    def scaled(self, factor: float) -> "Gradient":
        return Gradient({k: v * factor for k, v in self.arrays.items()}, self.count)

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.arrays.items()}

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.arrays.values())))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


@dataclass
class Forward:
    contexts: np.ndarray
    x: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    values: np.ndarray


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def windows(tokens: Sequence[int], window: int, pad_id: int) -> np.ndarray:
    """Row j holds the ``window`` tokens preceding position j, left-padded."""
    padded = np.concatenate([np.full(window, pad_id, dtype=np.int64), np.asarray(tokens, dtype=np.int64)])
    return sliding_window_view(padded, window)[: len(tokens)]


class Policy:
    def __init__(self, vocab: Vocabulary, *, embed_dim: int = 8, hidden: int = 64, window: int = 16,
                 seed: int = 0, init_scale: float = 0.05, params: dict[str, np.ndarray] | None = None):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.window = window
        if params is None:
            rng = np.random.default_rng(seed)
            V, d, h = len(vocab), embed_dim, hidden
            params = {
                "emb": rng.uniform(-init_scale, init_scale, (V, d)),
                "W1": rng.uniform(-init_scale, init_scale, (window * d, h)),
                "b1": np.zeros(h),
                "W2": np.zeros((h, V)),
                "b2": np.zeros(V),
                "wv": np.zeros(h),
                "bv": np.zeros(1),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self._check_shapes()

    def _check_shapes(self) -> None:
        V, d, h, W = len(self.vocab), self.embed_dim, self.hidden, self.window
        expected = {"emb": (V, d), "W1": (W * d, h), "b1": (h,), "W2": (h, V), "b2": (V,),
                    "wv": (h,), "bv": (1,)}
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ShapeError(f"{k}: expected {shape}, got {self.params[k].shape}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def copy(self) -> "Policy":
        return Policy(self.vocab, embed_dim=self.embed_dim, hidden=self.hidden, window=self.window,
                      params={k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward -----------------------------------------------------------

    def context_matrix(self, contexts) -> np.ndarray:
        """Coerce one context or a batch of contexts into a (B, window) id matrix."""
        if isinstance(contexts, np.ndarray) and contexts.ndim == 2:
            ctx = contexts.astype(np.int64, copy=False)
            if ctx.shape[1] != self.window:
                raise ShapeError(f"context width {ctx.shape[1]} != window {self.window}")
        else:
            rows = [list(c)[-self.window:] for c in contexts]
            ctx = np.full((len(rows), self.window), self.vocab.pad_id, dtype=np.int64)
            for i, row in enumerate(rows):
                if row:
                    ctx[i, self.window - len(row):] = row
        if ctx.size and (ctx.min() < 0 or ctx.max() >= self.vocab_size):
            raise EncodingError("token id out of vocabulary range")
        return ctx

    def forward(self, contexts) -> Forward:
        ctx = self.context_matrix(contexts)
        p = self.params
        x = p["emb"][ctx].reshape(len(ctx), -1)
        hidden = np.tanh(x @ p["W1"] + p["b1"])
        logits = hidden @ p["W2"] + p["b2"]
        values = hidden @ p["wv"] + p["bv"][0]
        return Forward(ctx, x, hidden, logits, values)

    def logits(self, context: Sequence[int]) -> np.ndarray:
        return self.forward([context]).logits[0]

    def value(self, context: Sequence[int]) -> float:
        return float(self.forward([context]).values[0])

    def log_probs(self, contexts, targets, temperature: float = 1.0) -> np.ndarray:
        fw = self.forward(contexts)
        logp = log_softmax(fw.logits / temperature)
        return logp[np.arange(len(logp)), np.asarray(targets)]

    def entropy(self, contexts, temperature: float = 1.0) -> np.ndarray:
        logp = log_softmax(self.forward(contexts).logits / temperature)
        return -(np.exp(logp) * logp).sum(axis=1)

    def sequence_log_probs(self, tokens: Sequence[int], positions: Sequence[int] | None = None,
                           temperature: float = 1.0) -> np.ndarray:
        """Log-probs of ``tokens[j]`` given its preceding window, at the given positions."""
        ctx = windows(tokens, self.window, self.vocab.pad_id)
        tokens = np.asarray(tokens)
        if positions is not None:
            ctx, tokens = ctx[np.asarray(positions)], tokens[np.asarray(positions)]
        return self.log_probs(ctx, tokens, temperature)

    # -- sampling ----------------------------------------------------------

    def sample_batch(self, prefixes: Sequence[Sequence[int]], rngs: Sequence[np.random.Generator],
                     temperature: float, max_tokens: int,
                     stop_ids: Sequence[int] = ()) -> list[tuple[list[int], list[float], list[float]]]:
        """Sample one turn per prefix in lockstep.

        Returns per prefix the generated tokens, their log-probs under the
        sampling distribution, and the per-position distribution entropies.
        Generation ends after a stop token or ``max_tokens`` tokens.
        """
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        stops = set(stop_ids) | {self.vocab.eot_id}
        seqs = [list(p)[-self.window:] for p in prefixes]
        out = [([], [], []) for _ in prefixes]
        active = list(range(len(prefixes)))
        for _ in range(max_tokens):
            if not active:
                break
            fw = self.forward([seqs[i] for i in active])
            logp = log_softmax(fw.logits / temperature)
            probs = np.exp(logp)
            ent = -(probs * logp).sum(axis=1)
            cdf = np.cumsum(probs, axis=1)
            still = []
            for row, i in enumerate(active):
                u = rngs[i].random() * cdf[row, -1]
                tok = min(int(np.searchsorted(cdf[row], u, side="right")), self.vocab_size - 1)
                out[i][0].append(tok)
                out[i][1].append(float(logp[row, tok]))
                out[i][2].append(float(ent[row]))
                seqs[i].append(tok)
                if len(seqs[i]) > self.window:
                    del seqs[i][0]
                if tok not in stops:
                    still.append(i)
            active = still
        return out

    def sample_turn(self, context: Sequence[int], temperature: float, rng: np.random.Generator,
                    max_tokens: int = 16, stop_ids: Sequence[int] = ()) -> tuple[list[int], list[float]]:
        tokens, logps, _ = self.sample_batch([context], [rng], temperature, max_tokens, stop_ids)[0]
        return tokens, logps

    # -- gradients ---------------------------------------------------------

    def backward(self, fw: Forward, dlogits: np.ndarray | None = None,
                 dvalues: np.ndarray | None = None) -> Gradient:
        """Backpropagate d(objective)/d(logits) and d(objective)/d(values)."""
        p = self.params
        B = len(fw.contexts)
        if dlogits is None:
            dlogits = np.zeros((B, self.vocab_size))
        if dvalues is None:
            dvalues = np.zeros(B)
        g = {
            "W2": fw.hidden.T @ dlogits,
            "b2": dlogits.sum(axis=0),
            "wv": fw.hidden.T @ dvalues,
            "bv": np.array([dvalues.sum()]),
        }
        dhidden = dlogits @ p["W2"].T + np.outer(dvalues, p["wv"])
        dpre = dhidden * (1.0 - fw.hidden ** 2)
        g["W1"] = fw.x.T @ dpre
        g["b1"] = dpre.sum(axis=0)
        dx = (dpre @ p["W1"].T).reshape(B, self.window, self.embed_dim)
        demb = np.zeros_like(p["emb"])
        np.add.at(demb, fw.contexts, dx)
        g["emb"] = demb
        return Gradient(g, B)

    def grad_log_prob(self, contexts, targets, weights, temperature: float = 1.0) -> Gradient:
        """Gradient of sum_t weight_t * log pi(target_t | context_t)."""
        weights = np.asarray(weights, dtype=np.float64)
        if not np.all(np.isfinite(weights)):
            raise NumericError("non-finite token weight")
        fw = self.forward(contexts)
        targets = np.asarray(targets)
        if weights.shape != targets.shape or len(targets) != len(fw.contexts):
            raise ShapeError("contexts, targets and weights must align")
        probs = np.exp(log_softmax(fw.logits / temperature))
        dz = -probs * weights[:, None]
        dz[np.arange(len(targets)), targets] += weights
        return self.backward(fw, dz / temperature)

    def grad_value(self, contexts, weights) -> Gradient:
        """Gradient of sum_t weight_t * V(context_t)."""
        fw = self.forward(contexts)
        return self.backward(fw, dvalues=np.asarray(weights, dtype=np.float64))

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path, **meta) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": {"embed_dim": self.embed_dim, "hidden": self.hidden, "window": self.window},
            "vocab": self.vocab.to_dict(),
            "meta": meta,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> tuple["Policy", dict]:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a policy checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')}")
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
        try:
            policy = cls(Vocabulary.from_dict(doc["vocab"]), params=params, **doc["dims"])
        except (KeyError, ShapeError) as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        return policy, doc.get("meta", {})
