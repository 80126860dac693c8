"""Invertible featurizers for hidden vectors: identity, PCA, sparse autoencoder, and rotations.

Every featurizer intervenes the same way: features of the base vector are
moved towards the counterfactual's features by a mask, mapped back, and the
base vector's reconstruction error is added so that a zero mask is an exact
no-op even for a lossy map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import DTYPE


class FeaturizerError(ValueError):
    pass


class Featurizer:
    kind = "abstract"

    def __init__(self, d: int, k: int):
        self.d, self.k = d, k

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def residual(self, h: torch.Tensor) -> torch.Tensor:
        """What the feature round trip loses on ``h``."""
        return h - self.decode(self.encode(h))

    def intervene(self, h_base: torch.Tensor, h_cf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Features <- (1 - mask) * base + mask * counterfactual, plus the base residual."""
        fb = self.encode(h_base)
        f = fb + mask * (self.encode(h_cf) - fb)
        return self.decode(f) + (h_base - self.decode(fb))

    def state(self) -> dict[str, np.ndarray]:
        return {}


class IdentityFeaturizer(Featurizer):
    kind = "identity"

    def __init__(self, d: int):
        if d <= 0:
            raise FeaturizerError("dimension must be positive")
        super().__init__(d, d)

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return h

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return f

    def intervene(self, h_base: torch.Tensor, h_cf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return h_base + mask * (h_cf - h_base)


def make_identity(d: int) -> IdentityFeaturizer:
    return IdentityFeaturizer(d)


class RotationFeaturizer(Featurizer):
    """f = (h - center) @ basis for an orthogonal (d, d) basis."""

    def __init__(self, basis: torch.Tensor, center: torch.Tensor | None = None, kind: str = "rotation"):
        d = basis.shape[0]
        if basis.shape != (d, d):
            raise FeaturizerError("basis must be square")
        super().__init__(d, d)
        self.kind = kind
        self.basis = basis.to(DTYPE)
        self.center = torch.zeros(d, dtype=DTYPE) if center is None else center.to(DTYPE)

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return (h - self.center) @ self.basis

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return f @ self.basis.T + self.center

    def state(self) -> dict[str, np.ndarray]:
        return {"basis": self.basis.numpy(), "center": self.center.numpy()}


def _fix_signs(vectors: torch.Tensor) -> torch.Tensor:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = vectors.abs().argmax(dim=0)
    signs = torch.sign(vectors[idx, torch.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def pca_fit(samples: torch.Tensor) -> RotationFeaturizer:
    """Principal axes of ``samples`` (N, d), sorted by explained variance."""
    samples = torch.as_tensor(samples, dtype=DTYPE)
    n, d = samples.shape
    if n <= d:
        raise FeaturizerError(f"PCA needs more samples than dimensions ({n} <= {d})")
    center = samples.mean(dim=0)
    _, _, vh = torch.linalg.svd(samples - center, full_matrices=True)
    return RotationFeaturizer(_fix_signs(vh.T.contiguous()), center, kind="pca")


def orthonormalize(q: torch.Tensor) -> torch.Tensor:
    """Orthonormal columns spanning the same nested subspaces as ``q`` (Gram-Schmidt via QR)."""
    qq, r = torch.linalg.qr(q)
    signs = torch.sign(torch.diagonal(r))
    signs[signs == 0] = 1.0
    return qq * signs


def complete_basis(q: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Extend orthonormal columns (d, r) to a full orthogonal (d, d) basis whose first r columns are q."""
    d, r = q.shape
    gen = torch.Generator().manual_seed(seed)
    rest = torch.randn(d, d - r, generator=gen, dtype=DTYPE)
    rest = rest - q @ (q.T @ rest)
    full = orthonormalize(torch.cat([q, rest], dim=1))
    full[:, :r] = q
    return full


def rotation_from_directions(q: torch.Tensor, seed: int = 0) -> RotationFeaturizer:
    return RotationFeaturizer(complete_basis(q.to(DTYPE), seed), kind="das")


# ----------------------------------------------------------------------------
# sparse autoencoder

class SAEFeaturizer(Featurizer):
    kind = "sae"

    def __init__(self, w_enc: torch.Tensor, b_enc: torch.Tensor, w_dec: torch.Tensor, b_dec: torch.Tensor):
        super().__init__(w_enc.shape[0], w_enc.shape[1])
        self.w_enc, self.b_enc, self.w_dec, self.b_dec = w_enc, b_enc, w_dec, b_dec

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        return torch.relu((h - self.b_dec) @ self.w_enc + self.b_enc)

    def decode(self, f: torch.Tensor) -> torch.Tensor:
        return f @ self.w_dec + self.b_dec

    def state(self) -> dict[str, np.ndarray]:
        return {"w_enc": self.w_enc.numpy(), "b_enc": self.b_enc.numpy(),
                "w_dec": self.w_dec.numpy(), "b_dec": self.b_dec.numpy()}


@dataclass(frozen=True)
class SAEConfig:
    latent_mult: int = 4
    l1: float = 1e-3
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 128
    seed: int = 0


def sae_train(acts: torch.Tensor, k: int | None = None, l1: float | None = None, hyper: SAEConfig = SAEConfig()) -> SAEFeaturizer:
    acts = torch.as_tensor(acts, dtype=DTYPE)
    n, d = acts.shape
    k = hyper.latent_mult * d if k is None else k
    l1 = hyper.l1 if l1 is None else l1
    if k < d:
        raise FeaturizerError(f"latent size {k} is smaller than the input dimension {d}")
    gen = torch.Generator().manual_seed(hyper.seed)
    scale = acts.std().clamp(min=1e-8)
    # Orthonormal columns make the encoder the decoder's exact inverse at init.
    w_dec = orthonormalize(torch.randn(k, d, generator=gen, dtype=DTYPE))
    params = {
        "w_enc": w_dec.T.clone().requires_grad_(True),
        "b_enc": torch.full((k,), 0.5, dtype=DTYPE, requires_grad=True),
        "w_dec": w_dec.clone().requires_grad_(True),
        "b_dec": acts.mean(dim=0).clone().requires_grad_(True),
    }
    opt = torch.optim.Adam(params.values(), lr=hyper.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(hyper.steps, 1))
    for step in range(hyper.steps):
        idx = torch.randint(0, n, (min(hyper.batch_size, n),), generator=gen)
        x = acts[idx] / scale
        f = torch.relu((x - params["b_dec"] / scale) @ params["w_enc"] + params["b_enc"])
        recon = f @ params["w_dec"] + params["b_dec"] / scale
        loss = ((recon - x) ** 2).sum(dim=-1).mean() + l1 * f.abs().sum(dim=-1).mean()
        if not torch.isfinite(loss):
            raise FeaturizerError(f"SAE training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    # Training ran on rescaled inputs; fold the scale back into the decoder.
    p = {name: t.detach() for name, t in params.items()}
    return SAEFeaturizer(p["w_enc"] / scale, p["b_enc"], p["w_dec"] * scale, p["b_dec"])


def reconstruction_error(feat: Featurizer, acts: torch.Tensor) -> float:
    """Mean squared round-trip error relative to the mean squared deviation from the mean."""
    acts = torch.as_tensor(acts, dtype=DTYPE)
    with torch.no_grad():
        err = ((feat.decode(feat.encode(acts)) - acts) ** 2).sum(dim=-1).mean()
        ref = ((acts - acts.mean(dim=0)) ** 2).sum(dim=-1).mean().clamp(min=1e-300)
    return float(err / ref)


def latent_density(feat: SAEFeaturizer, acts: torch.Tensor) -> float:
    """Fraction of latents active, averaged over samples."""
    with torch.no_grad():
        return float((feat.encode(torch.as_tensor(acts, dtype=DTYPE)) > 0).to(DTYPE).mean())


def save_featurizer(feat: Featurizer, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {"kind": feat.kind, "d": feat.d, "k": feat.k, **(extra or {})}
    arrays = {name: np.asarray(v) for name, v in feat.state().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return path


def load_featurizer(path: str | Path) -> Featurizer:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: torch.from_numpy(np.array(data[k])).to(DTYPE) for k in data.files if k != "__meta__"}
    kind = meta["kind"]
    if kind == "identity":
        return IdentityFeaturizer(meta["d"])
    if kind == "sae":
        return SAEFeaturizer(arrays["w_enc"], arrays["b_enc"], arrays["w_dec"], arrays["b_dec"])
    return RotationFeaturizer(arrays["basis"], arrays["center"], kind=kind)
