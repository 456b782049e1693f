"""Noise schedule, forward diffusion, denoiser training, ancestral sampling,
and a variational-bound likelihood estimate.

The forward process applies Gaussian transitions
q(x_t | x_{t-1}) = N(x_t; sqrt(1 - b_t) x_{t-1}, b_t I), which compose into
the closed form x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.  The reverse
process is a learned Gaussian chain whose mean comes from a noise-prediction
network and whose variance is fixed from the schedule.

Per-step variances are named `sched_beta` throughout to keep them distinct
from the fidelity guidance scale used elsewhere in the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nets import MicroNet, TrainConfig, train
from .rng import NoiseStream

ALPHA_BAR_FINAL_MAX = 1e-4


class SamplingDiverged(RuntimeError):
    """A reverse chain produced non-finite values; carries the timestep."""

    def __init__(self, timestep: int):
        super().__init__(f"non-finite state in reverse chain at t={timestep}")
        self.timestep = timestep


class NoiseSchedule:
    """The per-step variance ladder and derived quantities, indexed 1..T.

    Index 0 is a convention slot: sched_beta[0] = 0 and alpha_bar[0] = 1, so
    forward diffusion at t=0 returns the input unchanged.  The posterior
    variance at t=1 is clipped to the t=2 value; the exact value is zero,
    which would break the strictly-positive variance contract, and the final
    reverse step never draws noise anyway.
    """

    def __init__(self, n_steps: int, sched_beta: np.ndarray):
        sched_beta = np.asarray(sched_beta, dtype=np.float64)
        if sched_beta.shape != (n_steps,):
            raise ValueError(f"need {n_steps} beta values, got "
                             f"{sched_beta.shape}")
        if np.any(sched_beta <= 0) or np.any(sched_beta >= 1):
            raise ValueError("sched_beta values must lie in (0, 1)")
        self.n_steps = n_steps
        self.sched_beta = np.concatenate([[0.0], sched_beta])
        self.alpha = 1.0 - self.sched_beta
        self.alpha_bar = np.cumprod(self.alpha)
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        post = self.sched_beta.copy()
        post[1:] = (self.sched_beta[1:] * (1.0 - self.alpha_bar[:-1])
                    / (1.0 - self.alpha_bar[1:]))
        if n_steps >= 2:
            post[1] = post[2]
        self.posterior_var = post

    @classmethod
    def linear(cls, n_steps: int = 200, beta_start: float = 1e-4,
               beta_end: float = 0.02, anchor_steps: int = 1000) -> "NoiseSchedule":
        """Linear ladder with endpoints rescaled by anchor_steps/n_steps so a
        shorter ladder destroys as much signal as the anchor-length one."""
        scale = anchor_steps / n_steps
        return cls(n_steps, np.linspace(beta_start * scale, beta_end * scale,
                                        n_steps))

    @property
    def near_isotropic(self) -> bool:
        return self.alpha_bar[self.n_steps] < ALPHA_BAR_FINAL_MAX

    def check_timestep(self, t: int, minimum: int = 1):
        if not minimum <= t <= self.n_steps:
            raise ValueError(f"timestep {t} outside [{minimum}, {self.n_steps}]")

    def substeps(self, count: int) -> np.ndarray:
        """Evenly spaced sub-schedule T = t_0 > t_1 > ... > t_count = 0."""
        if not 2 <= count <= self.n_steps:
            raise ValueError(f"substeps must be in [2, {self.n_steps}], "
                             f"got {count}")
        ts = np.unique(np.round(np.linspace(0, self.n_steps, count + 1)))
        return ts.astype(int)[::-1]


def forward_diffuse(x0: np.ndarray, t: int, noise: np.ndarray,
                    sch: NoiseSchedule) -> np.ndarray:
    """Closed-form x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t=0 returns
    x0 exactly."""
    if not 0 <= t <= sch.n_steps:
        raise ValueError(f"timestep {t} outside [0, {sch.n_steps}]")
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 0:
        return x0.copy()
    abar = sch.alpha_bar[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(noise)


@dataclass
class DiffusionModel:
    """Noise-prediction network plus its schedule and variance convention."""

    denoiser: MicroNet
    schedule: NoiseSchedule
    class_conditional: bool = True
    variance_mode: str = "fixed-posterior"   # or "fixed-sched_beta"

    def __post_init__(self):
        if self.variance_mode not in ("fixed-posterior", "fixed-sched_beta"):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")
        if self.denoiser.raw_input_dim != self.denoiser.output_dim:
            raise ValueError("denoiser must map ambient dim to ambient dim")

    @property
    def dim(self) -> int:
        return self.denoiser.raw_input_dim

    def predict_noise(self, x_t: np.ndarray, t: int, cond) -> np.ndarray:
        out, _ = self.denoiser.forward(np.atleast_2d(x_t), t,
                                       cond if self.class_conditional else None)
        return out

    def step_variance(self, t: int, t_prev: int | None = None) -> float:
        """Diagonal reverse variance for the transition t -> t_prev."""
        sch = self.schedule
        if t_prev is None:
            t_prev = t - 1
        if t_prev == t - 1:
            base = sch.posterior_var[t] if self.variance_mode == "fixed-posterior" \
                else sch.sched_beta[t]
            return float(base)
        # Strided transition: recompute for the (t, t_prev) pair.
        abar_t, abar_prev = sch.alpha_bar[t], sch.alpha_bar[t_prev]
        beta_hat = 1.0 - abar_t / abar_prev
        if self.variance_mode == "fixed-sched_beta":
            return float(beta_hat)
        var = beta_hat * (1.0 - abar_prev) / (1.0 - abar_t)
        if var == 0.0:                      # t_prev == 0 pair; never sampled
            var = float(sch.posterior_var[1])
        return float(var)

    def posterior_mean_var(self, x_t: np.ndarray, t: int, cond,
                           t_prev: int | None = None,
                           eps_hat: np.ndarray | None = None
                           ) -> tuple[np.ndarray, float]:
        """Reverse-transition mean and (scalar diagonal) variance.

        The mean converts the predicted noise into the posterior mean of
        q(x_{t_prev} | x_t, x0_hat) with x0_hat = (x_t - sqrt(1-abar_t) eps)
        / sqrt(abar_t).
        """
        sch = self.schedule
        sch.check_timestep(t)
        if t_prev is None:
            t_prev = t - 1
        if not 0 <= t_prev < t:
            raise ValueError(f"t_prev {t_prev} must lie in [0, {t})")
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if eps_hat is None:
            eps_hat = self.predict_noise(x_t, t, cond)
        abar_t, abar_prev = sch.alpha_bar[t], sch.alpha_bar[t_prev]
        alpha_hat = abar_t / abar_prev
        beta_hat = 1.0 - alpha_hat
        x0_hat = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
        mean = (np.sqrt(abar_prev) * beta_hat / (1.0 - abar_t) * x0_hat
                + np.sqrt(alpha_hat) * (1.0 - abar_prev) / (1.0 - abar_t) * x_t)
        return mean, self.step_variance(t, t_prev)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("# diffusion model v1\n")
            fh.write(f"n_steps {self.schedule.n_steps}\n")
            fh.write("sched_beta " + " ".join(
                repr(v) for v in self.schedule.sched_beta[1:]) + "\n")
            fh.write(f"class_conditional {int(self.class_conditional)}\n")
            fh.write(f"variance_mode {self.variance_mode}\n")
        self.denoiser.save(str(path) + ".net")

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionModel":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or lines[0] != "# diffusion model v1":
            raise ValueError(f"{path}: not a diffusion checkpoint")
        fields = dict(line.split(maxsplit=1) for line in lines[1:])
        n_steps = int(fields["n_steps"])
        betas = np.array([float(v) for v in fields["sched_beta"].split()])
        sch = NoiseSchedule(n_steps, betas)
        net = MicroNet.load(str(path) + ".net")
        return cls(denoiser=net, schedule=sch,
                   class_conditional=bool(int(fields["class_conditional"])),
                   variance_mode=fields["variance_mode"])


def train_diffusion(points: np.ndarray, labels: np.ndarray | None,
                    sch: NoiseSchedule, cfg: TrainConfig,
                    hidden: tuple[int, ...] = (64, 64, 64, 64),
                    n_classes: int = 0, time_embed_width: int = 16,
                    input_scale=None) -> tuple[DiffusionModel, np.ndarray]:
    """Fit a noise-prediction network by the simplified denoising objective
    E ||eps - eps_hat(x_t, t, y)||^2 over random (x0, t, eps)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty training set")
    dim = points.shape[1]
    if input_scale is None:
        input_scale = max(1.0, float(points.std()))
    net = MicroNet([dim, *hidden, dim], seed=cfg.seed,
                   time_embed_width=time_embed_width, n_steps=sch.n_steps,
                   n_classes=n_classes, input_scale=input_scale)

    def objective(net, idx, rng):
        x0 = points[idx]
        t = rng.integers(1, sch.n_steps + 1, size=len(idx))
        eps = rng.standard_normal(x0.shape)
        abar = sch.alpha_bar[t][:, None]
        x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
        cond = labels[idx] if n_classes else None
        pred, cache = net.forward(x_t, t, cond)
        resid = pred - eps
        loss = float(np.mean(resid ** 2))
        adjoint = 2.0 * resid / resid.size
        return loss, net.grad_params(adjoint, cache)

    trace = train(net, objective, len(points), cfg)
    model = DiffusionModel(denoiser=net, schedule=sch,
                           class_conditional=bool(n_classes))
    return model, trace


# ---------------------------------------------------------------------------
# Ancestral reverse process.  One loop serves unguided and guided sampling:
# a step hook, when given, returns the additive per-step guidance term and
# is masked together with the noise at the final step.

def reverse_process(model: DiffusionModel, cond, n: int, seed: int,
                    stride: int = 1, start_chain: int = 0,
                    step_hook=None, snapshot_ts: tuple[int, ...] = ()
                    ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run n reverse chains from x_T to x_0.

    step_hook(x_t, t, var) -> additive guidance array (n, d) or None; it is
    evaluated at the pre-transition state x_t and masked, together with the
    transition noise, on the final step.  Returns (samples, snapshots) with
    snapshots keyed by timestep in decreasing-t insertion order.
    """
    sch = model.schedule
    if stride < 1 or stride > sch.n_steps:
        raise ValueError(f"stride must be in [1, {sch.n_steps}]")
    ts = list(range(sch.n_steps, 0, -stride))
    if ts[-1] != 1:
        ts.append(1)
    t_next = ts[1:] + [0]

    stream = NoiseStream(seed)
    x = stream.init_latents(start_chain, n, model.dim)
    snapshots: dict[int, np.ndarray] = {}
    want = set(snapshot_ts)
    if sch.n_steps in want:
        snapshots[sch.n_steps] = x.copy()
    for t, t_prev in zip(ts, t_next):
        mean, var = model.posterior_mean_var(x, t, cond, t_prev=t_prev)
        if t_prev == 0:
            x = mean                                   # z = 0, guidance masked
        else:
            z = stream.step_noise(t, start_chain, n, model.dim)
            bump = step_hook(x, t, var) if step_hook is not None else None
            x = mean + np.sqrt(var) * z
            if bump is not None:
                x = x + bump
        if not np.isfinite(x).all():
            raise SamplingDiverged(t)
        if t_prev in want:
            snapshots[t_prev] = x.copy()
    return x, snapshots


def baseline_sample(model: DiffusionModel, y, n: int, seed: int,
                    stride: int = 1, start_chain: int = 0,
                    snapshot_ts: tuple[int, ...] = ()) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Unguided ancestral sampling x_{t-1} = mean + sqrt(var) z, final step
    noiseless."""
    return reverse_process(model, y, n, seed, stride=stride,
                           start_chain=start_chain, snapshot_ts=snapshot_ts)


# ---------------------------------------------------------------------------
# Variational-bound negative log-likelihood (nats per dimension).

def _gauss_kl(mean_q, var_q: float, mean_p, var_p: float) -> np.ndarray:
    """KL(N(mean_q, var_q I) || N(mean_p, var_p I)) per batch row, in nats."""
    d = mean_q.shape[-1]
    return 0.5 * (d * (np.log(var_p / var_q) + var_q / var_p - 1.0)
                  + np.sum((mean_q - mean_p) ** 2, axis=-1) / var_p)


def vlb_nll(model: DiffusionModel, x0: np.ndarray, y, n_mc: int,
            seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of the variational bound on -log p(x0), in nats
    per dimension.  Returns (mean, standard error).

    Each draw picks t uniformly from [2, T] and a fresh eps, evaluates the
    per-step KL term scaled by (T - 1), and adds the exact prior term plus a
    single-sample estimate of the final reconstruction term.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    sch = model.schedule
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    d = x0.shape[1]
    rng = np.random.default_rng(seed)
    T = sch.n_steps

    # Prior term: KL(q(x_T | x0) || N(0, I)); exact.
    abar_T = sch.alpha_bar[T]
    prior = _gauss_kl(np.sqrt(abar_T) * x0, 1.0 - abar_T,
                      np.zeros_like(x0), 1.0)[0]

    draws = np.zeros(n_mc)
    for i in range(n_mc):
        t = int(rng.integers(2, T + 1))
        eps = rng.standard_normal(x0.shape)
        x_t = forward_diffuse(x0, t, eps, sch)
        abar_t, abar_prev = sch.alpha_bar[t], sch.alpha_bar[t - 1]
        beta_t = sch.sched_beta[t]
        true_mean = (np.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * x0
                     + np.sqrt(sch.alpha[t]) * (1.0 - abar_prev)
                     / (1.0 - abar_t) * x_t)
        true_var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
        model_mean, model_var = model.posterior_mean_var(x_t, t, y)
        kl = _gauss_kl(true_mean, float(true_var), model_mean, model_var)[0]

        eps1 = rng.standard_normal(x0.shape)
        x_1 = forward_diffuse(x0, 1, eps1, sch)
        mean1, var1 = model.posterior_mean_var(x_1, 1, y)
        recon = 0.5 * (d * np.log(2 * np.pi * var1)
                       + np.sum((x0 - mean1) ** 2) / var1)
        draws[i] = (T - 1) * kl + recon + prior

    per_dim = draws / d
    return float(per_dim.mean()), float(per_dim.std(ddof=1) / np.sqrt(n_mc))
