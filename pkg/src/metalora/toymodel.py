"""Toy conditional denoiser standing in for a latent diffusion backbone.

A DDPM-style forward process corrupts d-dimensional latent vectors, and a
two-layer tanh network predicts the injected noise from the noisy latent, a
sinusoidal timestep embedding, and a one-hot prompt code. Both linear layers
carry three-factor adapters; identity information enters the model ONLY
through those adapter factors — the base weights and the conditioning are
identity-agnostic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdaptedLayer, AdapterFactors, init_factors
from .errors import ConvergenceError, DimensionError, NumericError
from .numerics import AdamWState, adamw_step, make_rng

TEMB_DIM = 8


@dataclass
class DiffusionSchedule:
    alpha_bar: np.ndarray  # strictly decreasing, in (0, 1]

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 1:
            raise DimensionError("DiffusionSchedule: alpha_bar", ab.shape)
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.alpha_bar = ab

    @property
    def T(self) -> int:
        return len(self.alpha_bar)


def linear_schedule(T: int = 50, start: float = 0.999, end: float = 0.01) -> DiffusionSchedule:
    return DiffusionSchedule(np.linspace(start, end, T))


def noisify(schedule: DiffusionSchedule, x0: np.ndarray, t: int,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Forward-process sample: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} out of range [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    eps = rng.normal(0.0, 1.0, size=x0.shape)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return x_t, eps


def time_embedding(t: int, T: int, dim: int = TEMB_DIM) -> np.ndarray:
    """Sinusoidal features of t/T; gives the no-bias network usable constants."""
    half = dim // 2
    freqs = np.arange(1, half + 1, dtype=np.float64)
    phase = 2.0 * np.pi * freqs * (t / T)
    return np.concatenate([np.sin(phase), np.cos(phase)])


@dataclass
class Example:
    identity: int
    x0: np.ndarray  # (d,)
    prompt_id: int
    split: str  # "reference" or "test"
    # synthetic source-image geometry, consumed by the crop planner
    image_w: int = 1024
    image_h: int = 1024
    face_box: tuple[int, int, int, int] = (384, 384, 256, 256)


@dataclass
class ToyIdentityDataset:
    prototypes: np.ndarray  # (n_identities, d)
    examples: list[Example]
    n_prompts: int
    perturbation_std: float

    @property
    def n_identities(self) -> int:
        return len(self.prototypes)

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def of_identity(self, identity: int) -> list[Example]:
        return [e for e in self.examples if e.identity == identity]

    def reference_of(self, identity: int) -> Example:
        return next(e for e in self.of_identity(identity) if e.split == "reference")


def make_dataset(rng: np.random.Generator, n_identities: int = 16, d: int = 32,
                 samples_per_identity: int = 20, n_prompts: int = 4,
                 prototype_std: float = 1.0, perturbation_frac: float = 0.1,
                 single_prototype: bool = False) -> ToyIdentityDataset:
    """Synthesize a per-identity latent dataset.

    Prototypes are resampled until pairwise separation is at least 4x the
    perturbation std, so identities are genuinely distinguishable. With
    ``single_prototype`` every identity shares one prototype (a degenerate
    control where there is nothing identity-specific to learn).
    """
    for _ in range(100):
        prototypes = rng.normal(0.0, prototype_std, size=(n_identities, d))
        if single_prototype:
            prototypes = np.tile(prototypes[:1], (n_identities, 1))
        # perturbation norm is perturbation_frac of the mean prototype norm,
        # i.e. per-dimension std = frac * |p| / sqrt(d)
        mean_norm = float(np.mean(np.linalg.norm(prototypes, axis=1)))
        pert_std = perturbation_frac * mean_norm / np.sqrt(d)
        if single_prototype:
            break
        diffs = prototypes[:, None, :] - prototypes[None, :, :]
        dists = np.linalg.norm(diffs, axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= 4.0 * pert_std:
            break
    else:
        raise ConvergenceError("could not draw sufficiently separated prototypes")

    examples = []
    for i in range(n_identities):
        for k in range(samples_per_identity):
            x0 = prototypes[i] + rng.normal(0.0, pert_std, size=d)
            prompt_id = int(rng.integers(n_prompts))
            fw, fh = int(rng.integers(180, 420)), int(rng.integers(180, 420))
            fx = int(rng.integers(0, 1024 - fw))
            fy = int(rng.integers(0, 1024 - fh))
            examples.append(Example(identity=i, x0=x0, prompt_id=prompt_id,
                                    split="reference" if k == 0 else "test",
                                    image_w=1024, image_h=1024,
                                    face_box=(fx, fy, fw, fh)))
    return ToyIdentityDataset(prototypes=prototypes, examples=examples,
                              n_prompts=n_prompts, perturbation_std=pert_std)


def subset_dataset(dataset: ToyIdentityDataset, identity_ids: list[int]) -> ToyIdentityDataset:
    """Restrict to the given identities, renumbering them 0..k-1."""
    remap = {old: new for new, old in enumerate(identity_ids)}
    examples = [Example(identity=remap[e.identity], x0=e.x0, prompt_id=e.prompt_id,
                        split=e.split, image_w=e.image_w, image_h=e.image_h,
                        face_box=e.face_box)
                for e in dataset.examples if e.identity in remap]
    return ToyIdentityDataset(prototypes=dataset.prototypes[identity_ids],
                              examples=examples, n_prompts=dataset.n_prompts,
                              perturbation_std=dataset.perturbation_std)


@dataclass
class BatchGrads:
    """Gradients of one batch loss, routed per layer and per identity."""

    lmd: list[np.ndarray]
    w0: list[np.ndarray]
    per_identity: dict[int, list[tuple[np.ndarray, np.ndarray]]]  # id -> [(d_lm, d_lu)] per layer


class ToyDenoiser:
    """Two adapted linear layers around a tanh, predicting the injected noise."""

    def __init__(self, layer1: AdaptedLayer, layer2: AdaptedLayer, d: int,
                 n_prompts: int):
        self.layer1 = layer1
        self.layer2 = layer2
        self.d = d
        self.n_prompts = n_prompts
        self.hidden = layer1.factors.d2

    @classmethod
    def build(cls, rng: np.random.Generator, d: int = 32, hidden: int = 64,
              n_prompts: int = 4, r1: int = 16, r2: int = 1,
              factor_mode: str = "zero") -> "ToyDenoiser":
        d_in = d + TEMB_DIM + n_prompts
        w0_1 = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(hidden, d_in))
        w0_2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(d, hidden))
        f1 = init_factors(rng, d_in, hidden, r1, r2, mode=factor_mode)
        f2 = init_factors(rng, hidden, d, r1, r2, mode=factor_mode)
        return cls(AdaptedLayer(w0_1, f1), AdaptedLayer(w0_2, f2), d, n_prompts)

    @property
    def layers(self) -> list[AdaptedLayer]:
        return [self.layer1, self.layer2]

    def set_factors(self, f1: AdapterFactors, f2: AdapterFactors) -> None:
        self.layer1.factors = f1
        self.layer2.factors = f2

    def _conditioning(self, t: int, T: int, prompt_id: int) -> np.ndarray:
        onehot = np.zeros(self.n_prompts)
        onehot[prompt_id] = 1.0
        return np.concatenate([time_embedding(t, T), onehot])

    def predict(self, x_t: np.ndarray, t: int, T: int, prompt_id: int) -> np.ndarray:
        """Predict eps from the noisy latent and the conditioning. Caches
        intermediates for :meth:`backprop`."""
        inp = np.concatenate([x_t, self._conditioning(t, T, prompt_id)]).reshape(-1, 1)
        z = self.layer1.forward(inp)
        a = np.tanh(z)
        out = self.layer2.forward(a)
        self._bp_cache = (inp, a)
        return out[:, 0]

    def backprop(self, g_out: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output)."""
        inp, a = self._bp_cache
        g2 = self.layer2.backward(a, g_out.reshape(-1, 1))
        g_a = g2.x * (1.0 - a * a)  # tanh'
        g1 = self.layer1.backward(inp, g_a)
        return g1, g2


def diffusion_loss(model: ToyDenoiser, batch: list[Example],
                   schedule: DiffusionSchedule, rng: np.random.Generator,
                   factor_provider=None,
                   predictor=None) -> tuple[float, BatchGrads]:
    """Mean squared error between predicted and injected noise over a batch.

    ``factor_provider(identity)`` returns the (layer1, layer2) factor pair to
    install per item; omitted, the model's current factors are used for every
    item. ``predictor`` (tests only) overrides the model's eps prediction.
    """
    if not batch:
        raise ValueError("diffusion_loss: empty batch")
    n = len(batch)
    d = model.d
    total = 0.0
    grads = BatchGrads(
        lmd=[np.zeros_like(l.factors.l_meta_down) for l in model.layers],
        w0=[np.zeros_like(l.w0) for l in model.layers],
        per_identity={},
    )
    for idx, item in enumerate(batch):
        t = int(rng.integers(schedule.T))
        x_t, eps = noisify(schedule, item.x0, t, rng)
        if factor_provider is not None:
            f1, f2 = factor_provider(item.identity)
            model.set_factors(f1, f2)
        if predictor is not None:
            eps_hat = predictor(x_t, t, eps)
            resid = eps_hat - eps
            total += float(np.mean(resid ** 2))
            continue
        eps_hat = model.predict(x_t, t, schedule.T, item.prompt_id)
        resid = eps_hat - eps
        item_loss = float(np.mean(resid ** 2))
        if not np.isfinite(item_loss):
            raise NumericError(f"non-finite loss at batch index {idx}")
        total += item_loss
        g_out = 2.0 * resid / (d * n)
        g1, g2 = model.backprop(g_out)
        for li, g in enumerate((g1, g2)):
            grads.lmd[li] += g.l_meta_down
            grads.w0[li] += g.w0
        if item.identity not in grads.per_identity:
            grads.per_identity[item.identity] = [
                (np.zeros_like(model.layers[li].factors.l_mid),
                 np.zeros_like(model.layers[li].factors.l_up))
                for li in range(2)]
        for li, g in enumerate((g1, g2)):
            acc_lm, acc_lu = grads.per_identity[item.identity][li]
            acc_lm += g.l_mid
            acc_lu += g.l_up
    return total / n, grads


def pretrain_base(dataset: ToyIdentityDataset, schedule: DiffusionSchedule,
                  seed: int, hidden: int = 64, lr: float = 2e-3,
                  batch_size: int = 8, loss_threshold: float = 0.22,
                  max_iters: int = 15000, window: int = 200,
                  r1: int | None = None, r2: int = 1) -> ToyDenoiser:
    """Train the identity-agnostic base weights on pooled data, then freeze.

    The pool ignores identity labels entirely. Stops once the windowed mean
    loss drops below ``loss_threshold``; raises if the budget runs out first.
    """
    rng = make_rng(seed)
    if r1 is None:
        r1 = min(16, dataset.d, hidden)
    model = ToyDenoiser.build(rng, d=dataset.d, hidden=hidden, r1=r1, r2=r2,
                              n_prompts=dataset.n_prompts, factor_mode="zero")
    states = [AdamWState(lr=lr) for _ in model.layers]
    pool = dataset.examples
    recent: list[float] = []
    for it in range(max_iters):
        idxs = rng.integers(len(pool), size=batch_size)
        batch = [pool[i] for i in idxs]
        loss, grads = diffusion_loss(model, batch, schedule, rng)
        for li, layer in enumerate(model.layers):
            adamw_step(layer.w0, grads.w0[li], states[li])
        recent.append(loss)
        if len(recent) > window:
            recent.pop(0)
        if len(recent) == window and float(np.mean(recent)) < loss_threshold:
            break
    else:
        raise ConvergenceError(
            f"pretraining did not reach loss {loss_threshold} within {max_iters} "
            f"iterations (windowed loss {np.mean(recent):.4f})")
    for layer in model.layers:
        layer.freeze_base()
    return model


def generate(model: ToyDenoiser, schedule: DiffusionSchedule, prompt_id: int,
             rng: np.random.Generator) -> np.ndarray:
    """Deterministic reverse pass (DDIM-style) from a seeded Gaussian latent."""
    x = rng.normal(0.0, 1.0, size=model.d)
    ab = schedule.alpha_bar
    for t in range(schedule.T - 1, -1, -1):
        eps_hat = model.predict(x, t, schedule.T, prompt_id)
        x0_hat = (x - np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(ab[t])
        if t > 0:
            x = np.sqrt(ab[t - 1]) * x0_hat + np.sqrt(1.0 - ab[t - 1]) * eps_hat
        else:
            x = x0_hat
    return x
