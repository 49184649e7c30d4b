"""Text/image embedding providers and the contrastive alignment stage.

Two providers share one interface: the reference provider is fully
deterministic and needs no network (hashed text tokens; compact image
features behind a fixed orthonormal projection), while the external provider
talks to an embedding service over HTTP. The alignment model trains a pair
of projection heads plus a learned temperature with the symmetric
cross-entropy loss over cosine similarities.
"""

from __future__ import annotations

import base64
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedInputError, NumericError, TrainingError, TransportError
from .nn import AdamW, Dense, L2Normalize, Network, ParamTensor, Relu, save_checkpoint
from .render import Image, image_to_bytes

EMBED_DIM = 768
_TOKEN_RE = re.compile(r"[a-z0-9]+")
_IMAGE_FEATURE_DIM = 16 * 16 + 4 * 4 * 3 + 16 + 1  # luma grid, rgb means, grad hist, bias
_PROJECTION_SEED = 1118


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise NumericError("cannot normalize a zero embedding")
    return v / n


def cosine(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.dot(_unit(a), _unit(b)))


def _pool_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) averaging matrix binning src cells into dst bins."""
    m = np.zeros((dst, src))
    bins = np.arange(src) * dst // src
    for i, b in enumerate(bins):
        m[b, i] = 1.0
    counts = m.sum(axis=1, keepdims=True)
    return m / np.maximum(counts, 1.0)


_projection_cache: dict[int, np.ndarray] = {}


def _projection_matrix() -> np.ndarray:
    if _PROJECTION_SEED not in _projection_cache:
        rng = np.random.default_rng(_PROJECTION_SEED)
        a = rng.normal(size=(EMBED_DIM, _IMAGE_FEATURE_DIM))
        q, _ = np.linalg.qr(a)  # (768, feature_dim), orthonormal columns
        _projection_cache[_PROJECTION_SEED] = q
    return _projection_cache[_PROJECTION_SEED]


def image_features(img: Image) -> np.ndarray:
    """Compact raw feature vector the reference image embedding projects from."""
    rgb = img.pixels[..., :3]
    luma = 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]
    h, w = luma.shape
    luma16 = _pool_matrix(h, 16) @ luma @ _pool_matrix(w, 16).T
    rgb4 = np.stack([_pool_matrix(h, 4) @ rgb[..., c] @ _pool_matrix(w, 4).T
                     for c in range(3)], axis=-1)
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    idx = np.clip(((ang + np.pi) / (2 * np.pi) * 16).astype(int), 0, 15)
    hist = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=16)
    total = hist.sum()
    if total > 0:
        hist = hist / total
    return np.concatenate([luma16.ravel(), rgb4.ravel(), hist, [1.0]])


class ReferenceProvider:
    """Deterministic, network-free provider; same text or image, same vector."""

    name = "reference"

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        vec = np.zeros(EMBED_DIM)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            n = int.from_bytes(digest, "little")
            sign = 1.0 if (n >> 32) & 1 else -1.0
            vec[n % EMBED_DIM] += sign
        return _unit(vec)

    def embed_image(self, img: Image) -> np.ndarray:
        return _unit(_projection_matrix() @ image_features(img))


class ExternalProvider:
    """HTTP client for an embedding/captioning service.

    Wire protocol: POST {base}/embed/text {"text": ...} and
    POST {base}/embed/image {"png_base64": ...} return {"embedding": [768]};
    POST {base}/caption {"png_base64", "prompt"} returns {"text": ...}.
    """

    name = "external"

    def __init__(self, base_url: str, timeout: float = 10.0, retries: int = 2,
                 transport=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.retries = retries
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout,
                                    transport=transport)

    def _post(self, path: str, payload: dict) -> dict:
        import httpx

        last_error = None
        for _ in range(self.retries + 1):
            try:
                resp = self._client.post(path, json=payload)
                resp.raise_for_status()
                return resp.json()
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_error = exc
        raise TransportError(
            f"embedding service {self.base_url}{path} failed after "
            f"{self.retries + 1} attempts: {last_error}",
            retries_exhausted=True,
        )

    @staticmethod
    def _parse_embedding(data: dict) -> np.ndarray:
        emb = data.get("embedding")
        if not isinstance(emb, list) or len(emb) != EMBED_DIM:
            raise MalformedInputError(
                f"service returned a bad embedding payload (len={len(emb) if isinstance(emb, list) else 'n/a'})"
            )
        return np.asarray(emb, dtype=np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        return self._parse_embedding(self._post("/embed/text", {"text": text}))

    def embed_image(self, img: Image) -> np.ndarray:
        b64 = base64.b64encode(image_to_bytes(img)).decode("ascii")
        return self._parse_embedding(self._post("/embed/image", {"png_base64": b64}))

    def caption(self, png_bytes: bytes, prompt: str) -> str:
        b64 = base64.b64encode(png_bytes).decode("ascii")
        data = self._post("/caption", {"png_base64": b64, "prompt": prompt})
        text = data.get("text")
        if not isinstance(text, str):
            raise MalformedInputError("caption service returned no text field")
        return text


@dataclass(frozen=True)
class PairedSample:
    image_path: str | None
    caption: str
    provenance: str = "uniform"
    image: Image | None = None

    def __post_init__(self):
        if not self.caption:
            raise ValueError("paired sample caption must be nonempty")
        if self.image_path is None and self.image is None:
            raise ValueError("paired sample needs an image path or an inline image")


def write_pairs_manifest(path: str | Path, samples) -> None:
    lines = [f"{s.image_path}\t{s.caption}\t{s.provenance}" for s in samples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs_manifest(path: str | Path) -> list[PairedSample]:
    samples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedInputError(
                f"{path}:{lineno}: expected 'image-path<TAB>caption<TAB>provenance'"
            )
        samples.append(PairedSample(parts[0], parts[1], parts[2]))
    return samples


class AlignmentModel:
    """Projection heads over a frozen base embedder, plus a learned temperature."""

    def __init__(self, base_dim: int = EMBED_DIM, hidden: int = 512, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.base_dim = base_dim
        self.image_head = Network([
            Dense(base_dim, hidden, rng, name="align.img.fc1"), Relu(),
            Dense(hidden, EMBED_DIM, rng, name="align.img.fc2"), L2Normalize(),
        ], name="image-head")
        self.text_head = Network([
            Dense(base_dim, hidden, rng, name="align.txt.fc1"), Relu(),
            Dense(hidden, EMBED_DIM, rng, name="align.txt.fc2"), L2Normalize(),
        ], name="text-head")
        self.log_temperature = ParamTensor("align.log_temperature",
                                           np.array(np.log(0.07)))

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.values))

    def params(self) -> list[ParamTensor]:
        return self.image_head.params() + self.text_head.params() + [self.log_temperature]

    def project_images(self, base: np.ndarray) -> np.ndarray:
        return self.image_head.forward(np.atleast_2d(base))[0]

    def project_texts(self, base: np.ndarray) -> np.ndarray:
        return self.text_head.forward(np.atleast_2d(base))[0]

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def restore(self, snap) -> None:
        for p, values in zip(self.params(), snap):
            p.values[...] = values


def contrastive_loss_from_embeddings(z: np.ndarray, t: np.ndarray, log_tau: float):
    """Symmetric cross-entropy over cosine similarities.

    Returns (loss, dL/dz, dL/dt, dL/dlog_tau). Inputs are the projected
    embeddings, one row per pair; rows are normalized here so the similarity
    matrix is exactly the cosine matrix over tau.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    if z.shape != t.shape or z.shape[0] < 1:
        raise ValueError(f"batch shapes differ: {z.shape} vs {t.shape}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(t))):
        raise NumericError("non-finite embedding in contrastive batch")
    p = z.shape[0]
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(zn < 1e-12) or np.any(tn < 1e-12):
        raise NumericError("zero-norm projected embedding in contrastive batch")
    zu, tu = z / zn, t / tn
    tau = float(np.exp(log_tau))
    s = zu @ tu.T / tau

    def row_softmax(m):
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    soft_i2t = row_softmax(s)
    soft_t2i = row_softmax(s.T)
    eye = np.eye(p)
    diag = np.arange(p)
    # fsum keeps the batch reduction independent of sample order
    loss_i2t = -math.fsum(np.log(soft_i2t[diag, diag])) / p
    loss_t2i = -math.fsum(np.log(soft_t2i[diag, diag])) / p
    loss = 0.5 * (loss_i2t + loss_t2i)

    grad_s = 0.5 * ((soft_i2t - eye) / p + ((soft_t2i - eye) / p).T)
    dzu = grad_s @ tu / tau
    dtu = grad_s.T @ zu / tau
    dlog_tau = float(-np.sum(grad_s * s))
    # back through the row normalization
    dz = (dzu - zu * np.sum(dzu * zu, axis=1, keepdims=True)) / zn
    dt = (dtu - tu * np.sum(dtu * tu, axis=1, keepdims=True)) / tn
    return loss, dz, dt, dlog_tau


def contrastive_components(z: np.ndarray, t: np.ndarray, log_tau: float) -> tuple[float, float]:
    """The image-to-text and text-to-image cross-entropy terms separately."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    zu = z / np.linalg.norm(z, axis=1, keepdims=True)
    tu = t / np.linalg.norm(t, axis=1, keepdims=True)
    s = zu @ tu.T / float(np.exp(log_tau))
    p = s.shape[0]
    diag = np.arange(p)

    def ce(m):
        shifted = m - m.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return -math.fsum(shifted[diag, diag] - logz) / p

    return ce(s), ce(s.T)


def contrastive_loss(model: AlignmentModel, image_base: np.ndarray,
                     text_base: np.ndarray, accumulate_grads: bool = True):
    """Project a batch through both heads; optionally backprop into the model."""
    z, z_caches = model.image_head.forward(np.atleast_2d(image_base))
    t, t_caches = model.text_head.forward(np.atleast_2d(text_base))
    loss, dz, dt, dlog_tau = contrastive_loss_from_embeddings(
        z, t, float(model.log_temperature.values)
    )
    if accumulate_grads:
        model.image_head.backward(z_caches, dz)
        model.text_head.backward(t_caches, dt)
        model.log_temperature.grad += dlog_tau
    return loss


@dataclass
class AlignmentConfig:
    batch_size: int = 128
    learning_rate: float = 5e-5
    epochs: int = 100
    weight_decay: float = 0.0
    holdout_fraction: float = 0.2
    seed: int = 0
    checkpoint_path: str | None = None


@dataclass
class AlignmentResult:
    loss_curve: list[float] = field(default_factory=list)
    retrieval_top1: float | None = None
    checkpoint_path: str | None = None
    holdout_size: int = 0


def retrieval_top1(model: AlignmentModel, image_base: np.ndarray,
                   text_base: np.ndarray, captions: list[str]) -> float:
    """Top-1 text-to-image retrieval, scored by caption equality.

    Captions collide by construction (several viewpoints share one octant
    phrase), so a retrieved image counts as a hit when its ground-truth
    caption matches the query caption.
    """
    z = model.project_images(image_base)
    t = model.project_texts(text_base)
    sims = t @ z.T
    best = np.argmax(sims, axis=1)
    hits = sum(captions[int(b)] == captions[i] for i, b in enumerate(best))
    return hits / len(captions)


def train_alignment(model: AlignmentModel, samples: list[PairedSample], provider,
                    config: AlignmentConfig = AlignmentConfig()) -> AlignmentResult:
    """Train the projection heads on paired samples; report held-out retrieval."""
    from .render import load_png

    if not samples:
        raise ValueError("empty training set")
    image_base = np.stack([
        provider.embed_image(s.image if s.image is not None else load_png(s.image_path))
        for s in samples
    ])
    text_base = np.stack([provider.embed_text(s.caption) for s in samples])
    captions = [s.caption for s in samples]

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    n_holdout = int(round(config.holdout_fraction * len(samples)))
    holdout, train = order[:n_holdout], order[n_holdout:]
    if len(train) == 0:
        raise ValueError("holdout fraction leaves no training samples")

    optimizer = AdamW(model.params(), lr=config.learning_rate,
                      weight_decay=config.weight_decay)
    result = AlignmentResult(holdout_size=len(holdout))
    last_good = model.snapshot()
    for _ in range(config.epochs):
        perm = rng.permutation(train)
        epoch_losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            if len(batch) < 2 and len(perm) > 1:
                continue  # a single leftover pair carries no contrastive signal
            optimizer.zero_grad()
            loss = contrastive_loss(model, image_base[batch], text_base[batch])
            if not np.isfinite(loss):
                model.restore(last_good)
                path = None
                if config.checkpoint_path:
                    save_checkpoint(config.checkpoint_path, model.params())
                    path = config.checkpoint_path
                raise TrainingError("contrastive loss diverged to a non-finite value",
                                    checkpoint_path=path)
            optimizer.step()
            epoch_losses.append(loss)
        if epoch_losses:
            result.loss_curve.append(float(np.mean(epoch_losses)))
        last_good = model.snapshot()

    eval_idx = holdout if len(holdout) else np.arange(len(samples))
    result.retrieval_top1 = retrieval_top1(
        model, image_base[eval_idx], text_base[eval_idx],
        [captions[int(i)] for i in eval_idx],
    )
    if config.checkpoint_path:
        save_checkpoint(config.checkpoint_path, model.params())
        result.checkpoint_path = config.checkpoint_path
    return result
