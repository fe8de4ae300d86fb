"""Quantitative evaluation: consecutive-frame pixel error, embedding-space
temporal consistency and prompt alignment. The embedding backend is injected;
the desk default is a seeded random projection."""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod

import numpy as np


class Embedder(ABC):
    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray:
        ...


class RandomProjectionEmbedder(Embedder):
    """Deterministic stand-in for a vision-language embedder: images pass
    through block-mean pooling and a fixed Gaussian projection; text seeds a
    per-string Gaussian vector. Outputs are unit norm."""

    def __init__(self, dim: int = 64, pool: int = 8, seed: int = 0):
        self.dim = dim
        self.pool = pool
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(size=(dim, pool * pool * 3))

    def _pool_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        bh, bw = h // self.pool, w // self.pool
        pooled = img[:bh * self.pool, :bw * self.pool].reshape(
            self.pool, bh, self.pool, bw, 3).mean(axis=(1, 3))
        return pooled.reshape(-1)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        v = self._proj @ self._pool_image(image)
        return v / np.linalg.norm(v)

    def embed_text(self, text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")
        v = np.random.default_rng(seed).normal(size=self.dim)
        return v / np.linalg.norm(v)


def pixel_mse_consistency(frames) -> float:
    """Mean over consecutive pairs of the per-pixel mean squared error."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    pair_mse = [float(np.mean((a - b) ** 2))
                for a, b in zip(frames[:-1], frames[1:])]
    return float(np.mean(pair_mse))


def temporal_embedding_consistency(frames, embedder: Embedder) -> float:
    """Mean cosine similarity between consecutive frame embeddings."""
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    embs = [embedder.embed_image(f) for f in frames]
    sims = [float(np.dot(a, b)) for a, b in zip(embs[:-1], embs[1:])]
    return float(np.mean(sims))


def text_alignment(frames, prompt: str, embedder: Embedder) -> float:
    """Mean cosine similarity between the prompt embedding and each frame."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least 1 frame")
    t = embedder.embed_text(prompt)
    return float(np.mean([np.dot(embedder.embed_image(f), t) for f in frames]))


def eval_report(frames, prompt: str | None = None,
                embedder: Embedder | None = None) -> dict:
    embedder = embedder or RandomProjectionEmbedder()
    report = {
        "n_frames": len(list(frames)),
        "pixel_mse": pixel_mse_consistency(frames),
        "tem_con": temporal_embedding_consistency(frames, embedder),
    }
    if prompt is not None:
        report["clip_text"] = text_alignment(frames, prompt, embedder)
    return report
