"""Model specification, the coordinate-ascent driver and model comparison."""

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, InvalidStateError, VBRestoreError
from .expfam import GammaFactor
from .operators import ConvKernel, as_image, as_kernel, noise_variance_estimate

MODELS = ("GAUSS", "MSG", "MSGM", "MGP", "MGMP")
MIXTURE_MODELS = ("MSG", "MSGM", "MGP", "MGMP")
REGIMES = ("VB", "JMAP", "EM")


@dataclass(frozen=True)
class Priors:
    """Hyper-constants of the conjugate priors.

    ``alpha_e0``/``beta_e0`` and ``alpha_f0``/``beta_f0`` are Gamma shape/rate
    pairs for the noise and image precisions. ``m0``, ``v0`` (class mean),
    ``a0``, ``b0`` (class variance, Inverse-Gamma shape/scale) and ``alpha0``
    (Dirichlet concentration, ``None`` meaning ``1/K``) govern the mixture
    models; ``w_shape0``/``w_rate0`` the kernel coefficient precisions.
    """

    alpha_e0: float = 1.0
    beta_e0: float = 1e-3
    alpha_f0: float = 1.0
    beta_f0: float = 1e-3
    m0: float = 0.0
    v0: float = 10.0
    a0: float = 1.0
    b0: float = 100.0
    alpha0: float | None = None
    w_shape0: float = 1.0
    w_rate0: float = 1.0

    def __post_init__(self):
        for name in ("alpha_e0", "beta_e0", "alpha_f0", "beta_f0", "v0", "a0", "b0",
                     "w_shape0", "w_rate0"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"prior constant {name} must be positive, got {value}",
                                  field=f"prior.{name}")
        if not math.isfinite(self.m0):
            raise ConfigError("prior constant m0 must be finite", field="prior.m0")
        if self.alpha0 is not None and not (self.alpha0 > 0 and math.isfinite(self.alpha0)):
            raise ConfigError("prior constant alpha0 must be positive", field="prior.alpha0")

    def dirichlet0(self, n_classes):
        return 1.0 / n_classes if self.alpha0 is None else self.alpha0


@dataclass(frozen=True)
class ModelSpec:
    """Everything that defines a run apart from the data.

    Parameters
    ----------
    model : {"GAUSS", "MSG", "MSGM", "MGP", "MGMP"}
    regime : {"VB", "JMAP", "EM"}
        JMAP and EM are defined for GAUSS only.
    n_classes : int
        Class count K of the mixture models (K = 1 is accepted and reduces
        the mixture to a single Gaussian prior).
    gamma : float
        Fixed Potts coupling (MGP, MGMP).
    kernel : ConvKernel
        Known blur, or the initial kernel when ``basis`` is given.
    diff_order : int
        Order of the smoothness operator of the GAUSS model (0, 1 or 2).
    basis : sequence of ConvKernel, optional
        Kernel atoms; when set, GAUSS runs the myopic (kernel-estimating) model.
    residual_moment : {"exact", "as_written"}
        Whether the noise-rate update includes the posterior-covariance term
        ``tr(H^T H Sigma)`` ("exact") or only the squared residual of the mean.
    """

    model: str = "GAUSS"
    regime: str = "VB"
    n_classes: int = 1
    gamma: float = 0.0
    priors: Priors = field(default_factory=Priors)
    kernel: ConvKernel = field(default_factory=ConvKernel.identity)
    diff_order: int = 1
    max_iterations: int = 200
    tolerance: float = 1e-6
    residual_moment: str = "exact"
    em_mstep: str = "map"
    mean_field: str = "soft"
    basis: tuple | None = None
    noise: str = "tied"
    per_sample_shape: str = "as_written"
    estimate_kernel: bool = True
    fix_scale: bool = True
    pcg_rtol: float = 1e-10
    pcg_maxiter: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "model", str(self.model).upper())
        object.__setattr__(self, "regime", str(self.regime).upper())
        object.__setattr__(self, "kernel", as_kernel(self.kernel))
        if self.basis is not None:
            object.__setattr__(self, "basis", tuple(as_kernel(b) for b in self.basis))
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}", field="model.name")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}", field="model.regime")
        if self.regime != "VB" and (self.model != "GAUSS" or self.basis is not None):
            raise ConfigError(
                f"regime {self.regime} is only available for the GAUSS model with a known kernel",
                field="model.regime",
            )
        if self.model in MIXTURE_MODELS:
            if int(self.n_classes) != self.n_classes or self.n_classes < 1:
                raise ConfigError("class count must be a positive integer", field="model.classes")
            if self.basis is not None:
                raise ConfigError("kernel estimation is only available for GAUSS",
                                  field="kernel.basis")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError("Potts coupling must be non-negative", field="model.gamma")
        if self.diff_order not in (0, 1, 2):
            raise ConfigError("difference order must be 0, 1 or 2", field="model.diff_order")
        if not (self.tolerance > 0):
            raise ConfigError("tolerance must be positive", field="solver.tolerance")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 0:
            raise ConfigError("max_iterations must be a non-negative integer",
                              field="solver.max_iterations")
        choices = {
            "residual_moment": ("exact", "as_written"),
            "em_mstep": ("map", "ml"),
            "mean_field": ("soft", "hard"),
            "noise": ("tied", "per_sample"),
            "per_sample_shape": ("as_written", "single"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}", field=name)

    @property
    def is_mixture(self):
        return self.model in MIXTURE_MODELS

    @property
    def is_myopic(self):
        return self.model == "GAUSS" and self.basis is not None

    @property
    def has_potts(self):
        return self.model in ("MGP", "MGMP")

    @property
    def has_local_mean(self):
        return self.model in ("MSGM", "MGMP")

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    free_energy: float
    summaries: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.free_energy):
            raise VBRestoreError(f"non-finite objective at iteration {self.iteration}")


@dataclass
class RunResult:
    """Final state and trace of :func:`run` (unpacks as ``state, trace``)."""

    state: object
    trace: list
    converged: bool
    spec: ModelSpec

    def __iter__(self):
        yield self.state
        yield self.trace

    @property
    def iterations(self):
        return self.trace[-1].iteration

    @property
    def free_energy(self):
        return self.trace[-1].free_energy


def make_engine(spec, data):
    """Instantiate the update engine for ``spec`` on ``data``."""
    data = as_image(data, "data")
    if spec.is_mixture:
        from .mixture import MixtureEngine
        return MixtureEngine(spec, data)
    if spec.is_myopic:
        from .myopic import MyopicEngine
        return MyopicEngine(spec, data)
    from .linear import LinearEngine
    return LinearEngine(spec, data)


def free_energy(state, data, spec):
    """Free energy (evidence lower bound) of ``state`` under ``spec``."""
    engine = make_engine(spec, data)
    engine.validate(state)
    return engine.free_energy(state)


def run(spec, data, init=None):
    """Coordinate ascent until the relative objective change drops below tolerance.

    The traced objective is the free energy for VB, the joint log-posterior
    for JMAP and the log marginal likelihood (plus log prior) for EM.
    """
    engine = make_engine(spec, data)
    state = engine.initial_state() if init is None else init
    engine.validate(state)
    trace = [TraceRow(0, engine.objective(state), engine.summaries(state))]
    converged = False
    for it in range(1, spec.max_iterations + 1):
        try:
            state = engine.step(state)
            value = engine.objective(state)
        except VBRestoreError as exc:
            if hasattr(exc, "iteration") and exc.iteration is None:
                exc.iteration = it
            raise
        prev = trace[-1].free_energy
        trace.append(TraceRow(it, value, engine.summaries(state)))
        if abs(value - prev) < spec.tolerance * abs(prev):
            converged = True
            break
    return RunResult(state, trace, converged, spec)


def select_model(results):
    """Return the model specification with the largest final free energy (first wins ties).

    ``results`` holds ``(spec, free_energy)`` pairs or :class:`RunResult`
    objects.
    """
    pairs = [(r.spec, r.free_energy) if isinstance(r, RunResult) else tuple(r) for r in results]
    if not pairs:
        raise ValueError("select_model needs at least one candidate")
    best = 0
    for i, (_, value) in enumerate(pairs):
        if value > pairs[best][1]:
            best = i
    return pairs[best][0]


def trace_columns(trace):
    keys = []
    for row in trace:
        for key in row.summaries:
            if key not in keys:
                keys.append(key)
    return ["iteration", "free_energy"] + keys


def write_trace_csv(trace, target):
    """Write the trace as CSV (``target`` is a path or a text stream)."""
    columns = trace_columns(trace)

    def emit(stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(columns)
        for row in trace:
            values = [row.iteration, repr(float(row.free_energy))]
            for key in columns[2:]:
                v = row.summaries.get(key, "")
                values.append(repr(float(v)) if v != "" else "")
            writer.writerow(values)

    if isinstance(target, io.TextIOBase):
        emit(target)
    else:
        with open(target, "w", newline="") as fh:
            emit(fh)


def read_trace_csv(path):
    """Read a trace CSV back into a list of dicts with float values."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else np.nan) for k, v in row.items()} for row in rows]


def is_monotone(values, rel_slack=1e-8):
    """True if ``values`` never decrease by more than ``rel_slack`` (relative)."""
    values = np.asarray(values, dtype=float)
    drops = values[:-1] - values[1:]
    return bool(np.all(drops <= rel_slack * np.maximum(np.abs(values[:-1]), 1e-300)))


def initial_noise_precision(alpha_e0, beta_e0, data, n_obs=None):
    """Starting ``q(theta_e)``: a Gamma centred on a data-driven noise estimate.

    The vague default prior has mean ``alpha_e0 / beta_e0``, often orders of
    magnitude above the true precision, which makes the first image update a
    near-inverse filter.  ``n_obs`` sets the pseudo-count (default: all
    samples).  Falls back to the prior when no estimate is available.
    """
    s2 = noise_variance_estimate(data)
    if s2 is None:
        return GammaFactor(alpha_e0, beta_e0)
    shape = alpha_e0 + 0.5 * (np.size(data) if n_obs is None else n_obs)
    return GammaFactor(shape, shape * s2)


def check_shape(state_shape, data_shape, what="state"):
    if tuple(state_shape) != tuple(data_shape):
        raise InvalidStateError(f"{what} has shape {tuple(state_shape)}, data has {tuple(data_shape)}")
