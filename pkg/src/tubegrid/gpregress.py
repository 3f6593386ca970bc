"""Online Gaussian-process regression of the load-current disturbance.

One squared-exponential GP per dq channel over a sliding window of noisy
current measurements.  The predictive mean and variance at the next sample
instant feed the confidence set that shapes the controller's tube.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .convexsets import Box, Ellipsoid

log = logging.getLogger(__name__)

# count of negative predictive variances clamped to zero (diagnostic only)
variance_clamp_count = 0


class GpError(ValueError):
    """Invalid dataset, hyperparameters or failed factorization."""


@dataclass(frozen=True)
class GpHyperparams:
    """SE-kernel output scale (A), length scale (s) and noise variance (A^2)."""

    h: float
    lam: float
    sigma_n2: float = 0.01

    def __post_init__(self):
        if self.h <= 0.0 or self.lam <= 0.0:
            raise GpError("output scale and length scale must be positive")
        if self.sigma_n2 < 0.0:
            raise GpError("noise variance must be nonnegative")


@dataclass(frozen=True)
class GpDataset:
    """Sliding window of measurement times and two-channel current samples."""

    times: np.ndarray
    values: np.ndarray          # (n, 2): d and q channel
    window_cap: int = 200
    delta_mu_hat: float = 0.0   # running max of the prediction-mean step
    last_mu_star: tuple = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(-1, 2) if v.size else v.reshape(0, 2)
        if v.shape != (t.size, 2):
            raise GpError("values must be (n, 2) matching the time vector")
        if t.size > 1 and np.any(np.diff(t) <= 0.0):
            raise GpError("sample times must be strictly increasing")
        if self.window_cap < 1:
            raise GpError("window_cap must be at least 1")
        if t.size > self.window_cap:
            raise GpError("dataset exceeds its window cap")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size

    @staticmethod
    def empty(window_cap=200):
        return GpDataset(times=np.zeros(0), values=np.zeros((0, 2)),
                         window_cap=window_cap)


@dataclass(frozen=True)
class GpPrediction:
    """Predictive mean (A) and diagonal covariance (A^2) for the two channels."""

    mu_star: np.ndarray
    sigma2_star: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_star, dtype=float))
        s2 = np.asarray(self.sigma2_star, dtype=float)
        if mu.shape != (2,) or s2.shape != (2, 2):
            raise GpError("prediction must be a 2-vector mean and 2x2 covariance")
        if s2[0, 0] < 0.0 or s2[1, 1] < 0.0:
            raise GpError("predictive variances must be nonnegative")
        object.__setattr__(self, "mu_star", mu)
        object.__setattr__(self, "sigma2_star", s2)


@dataclass(frozen=True)
class DisturbanceSetParams:
    """Confidence level and drift allowance defining the learned set."""

    confidence: float = 0.95
    chi2_quantile: float = 5.991464547107979
    delta_mu: float = 0.0
    l2_bound: float = 0.0
    drift_mode: str = "squared"   # "squared": radius^2 = chi2 + delta_mu (as typeset)
                                  # "linear":  radius = sqrt(chi2) + delta_mu

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise GpError("confidence must lie in (0, 1)")
        if self.chi2_quantile <= 0.0:
            raise GpError("chi2 quantile must be positive")
        if self.delta_mu < 0.0 or self.l2_bound < 0.0:
            raise GpError("delta_mu and l2_bound must be nonnegative")
        if self.drift_mode not in ("squared", "linear"):
            raise GpError("drift_mode must be 'squared' or 'linear'")


def chi2_quantile(confidence, dof=2):
    """Inverse chi-square CDF used for the confidence radius."""
    if not 0.0 < confidence < 1.0:
        raise GpError("confidence must lie in (0, 1)")
    if dof == 2:
        return -2.0 * math.log(1.0 - confidence)
    return float(chi2.ppf(confidence, dof))


def kernel(ki, kj, hp: GpHyperparams):
    """SE kernel h^2 exp(-((ki-kj)/lam)^2); symmetric, h^2 on the diagonal."""
    d = (np.asarray(ki, dtype=float) - np.asarray(kj, dtype=float)) / hp.lam
    return hp.h ** 2 * np.exp(-d ** 2)


def _gram(times, hp):
    d = (times[:, None] - times[None, :]) / hp.lam
    return hp.h ** 2 * np.exp(-d ** 2)


def _factor(times, hp):
    c = _gram(times, hp)
    n = times.size
    a = c + hp.sigma_n2 * np.eye(n)
    jitter = 0.0
    for _ in range(6):
        try:
            return c, cho_factor(a + jitter * np.eye(n), lower=True)
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * hp.h ** 2)
    raise GpError("kernel matrix not positive definite after jitter")


def posterior(ds: GpDataset, hp: GpHyperparams):
    """Posterior mean and covariance over the training disturbance values.

    mu_bar = C (C + sig^2 I)^{-1} y per channel (after centering), and
    sigma_bar = sig^2 C (C + sig^2 I)^{-1}, shared by both channels.
    """
    if len(ds) == 0:
        raise GpError("posterior of an empty dataset")
    c, fac = _factor(ds.times, hp)
    mean = ds.values.mean(axis=0)
    y = ds.values - mean
    mu_bar = c @ cho_solve(fac, y) + mean
    sigma_bar = hp.sigma_n2 * cho_solve(fac, c).T
    sigma_bar = 0.5 * (sigma_bar + sigma_bar.T)
    return mu_bar, sigma_bar


def predict(ds: GpDataset, hp: GpHyperparams, k_next) -> GpPrediction:
    """Predictive mean and variance at time ``k_next`` for both channels."""
    global variance_clamp_count
    if len(ds) == 0:
        raise GpError("prediction from an empty dataset")
    _, fac = _factor(ds.times, hp)
    mean = ds.values.mean(axis=0)
    y = ds.values - mean
    k_star = kernel(ds.times, float(k_next), hp)
    alpha = cho_solve(fac, y)
    mu = k_star @ alpha + mean
    var = hp.h ** 2 - k_star @ cho_solve(fac, k_star) + hp.sigma_n2
    if var < 0.0:
        variance_clamp_count += 1
        log.debug("predictive variance %.3e clamped to zero", var)
        var = 0.0
    return GpPrediction(mu_star=mu, sigma2_star=float(var) * np.eye(2))


def log_marginal_likelihood(ds: GpDataset, hp: GpHyperparams):
    """Sum of the per-channel log marginal likelihoods (centered data)."""
    _, fac = _factor(ds.times, hp)
    y = ds.values - ds.values.mean(axis=0)
    n = len(ds)
    logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
    total = 0.0
    for ch in range(y.shape[1]):
        alpha = cho_solve(fac, y[:, ch])
        total += -0.5 * y[:, ch] @ alpha - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi)
    return float(total)


def fit_hyperparams(ds: GpDataset, grid, sigma_n2=0.01) -> GpHyperparams:
    """Grid search maximizing the log marginal likelihood.

    ``grid`` is an iterable of (h, lam) pairs.  Ties break toward the
    smallest length scale, then the smallest output scale, so the result
    is deterministic.  Needs at least 8 samples.
    """
    if len(ds) < 8:
        raise GpError("hyperparameter fit needs at least 8 samples")
    pairs = sorted({(float(h), float(l)) for h, l in grid})
    if not pairs:
        raise GpError("empty hyperparameter grid")
    spread = float(np.ptp(ds.values))
    degenerate = spread < 1e-12
    if degenerate:
        log.warning("degenerate (constant) dataset; returning the grid minimum")
        h, lam = min(pairs)
        return GpHyperparams(h=h, lam=lam, sigma_n2=sigma_n2)
    best = None
    best_key = None
    for h, lam in pairs:
        hp = GpHyperparams(h=h, lam=lam, sigma_n2=sigma_n2)
        ll = log_marginal_likelihood(ds, hp)
        key = (-ll, lam, h)
        if best_key is None or key < best_key:
            best_key = key
            best = hp
    return best


def update_dataset(ds: GpDataset, k, measured_w1, mu_star=None) -> GpDataset:
    """Append a measurement, evict beyond the window cap, track the mean drift.

    When the caller supplies the prediction mean ``mu_star`` issued for this
    step, the running bound on consecutive mean steps is updated.
    """
    k = float(k)
    if len(ds) and k <= ds.times[-1]:
        raise GpError("sample times must be strictly increasing")
    w = np.atleast_1d(np.asarray(measured_w1, dtype=float))
    if w.shape != (2,):
        raise GpError("measurement must be a 2-vector")
    times = np.append(ds.times, k)
    values = np.vstack([ds.values, w])
    if times.size > ds.window_cap:
        times = times[-ds.window_cap:]
        values = values[-ds.window_cap:]
    delta = ds.delta_mu_hat
    last = ds.last_mu_star
    if mu_star is not None:
        mu_star = tuple(float(v) for v in np.asarray(mu_star).ravel())
        if last is not None:
            step = math.hypot(mu_star[0] - last[0], mu_star[1] - last[1])
            delta = max(delta, step)
        last = mu_star
    return GpDataset(times=times, values=values, window_cap=ds.window_cap,
                     delta_mu_hat=delta, last_mu_star=last)


def build_w_hat(pred: GpPrediction, sp: DisturbanceSetParams):
    """Confidence set for the load current and worst-case box for the model error.

    Returns the (2-D) current ellipsoid and the state-dimension box of the
    parametric term.  The caller maps the ellipsoid through the disturbance
    input matrix and Minkowski-adds the box.
    """
    if sp.drift_mode == "squared":
        radius2 = sp.chi2_quantile + sp.delta_mu
    else:
        radius2 = (math.sqrt(sp.chi2_quantile) + sp.delta_mu) ** 2
    w1 = Ellipsoid(center=pred.mu_star, shape=pred.sigma2_star, radius2=radius2)
    w2 = Box.symmetric(np.full(4, sp.l2_bound))
    return w1, w2


class GpModel:
    """Dataset, hyperparameters and the latest prediction, kept together.

    ``observe`` appends a measurement and invalidates the cached kernel
    factorization; predictions between observations reuse it.  The running
    mean-drift estimate is carried inside the dataset.
    """

    def __init__(self, hyperparams: GpHyperparams, window_cap=200):
        self._hp = hyperparams
        self.dataset = GpDataset.empty(window_cap)
        self.last_prediction = None
        self._fac = None
        self._alpha = None
        self._mean = None

    @property
    def hp(self):
        return self._hp

    @hp.setter
    def hp(self, value):
        self._hp = value
        self._fac = None

    def observe(self, k, measured_w1):
        self.dataset = update_dataset(self.dataset, k, measured_w1)
        self._fac = None
        return self.dataset

    def _refresh(self):
        if self._fac is None:
            _, self._fac = _factor(self.dataset.times, self._hp)
            self._mean = self.dataset.values.mean(axis=0)
            self._alpha = cho_solve(self._fac, self.dataset.values - self._mean)

    def predict_mean(self, k_next):
        """Predictive mean only, reusing the cached factorization."""
        if len(self.dataset) == 0:
            raise GpError("prediction from an empty dataset")
        self._refresh()
        k_star = kernel(self.dataset.times, float(k_next), self._hp)
        return k_star @ self._alpha + self._mean

    def predict_at(self, k_next) -> GpPrediction:
        global variance_clamp_count
        if len(self.dataset) == 0:
            raise GpError("prediction from an empty dataset")
        self._refresh()
        hp = self._hp
        k_star = kernel(self.dataset.times, float(k_next), hp)
        mu = k_star @ self._alpha + self._mean
        var = hp.h ** 2 - k_star @ cho_solve(self._fac, k_star) + hp.sigma_n2
        if var < 0.0:
            variance_clamp_count += 1
            var = 0.0
        pred = GpPrediction(mu_star=mu, sigma2_star=float(var) * np.eye(2))
        mu_t = tuple(float(v) for v in pred.mu_star)
        last = self.dataset.last_mu_star
        delta = self.dataset.delta_mu_hat
        if last is not None:
            delta = max(delta, math.hypot(mu_t[0] - last[0], mu_t[1] - last[1]))
        self.dataset = replace(self.dataset, delta_mu_hat=delta, last_mu_star=mu_t)
        self.last_prediction = pred
        return pred


def dump_csv(ds: GpDataset, path):
    """Write the window as rows of (time, w1d, w1q)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "w1d", "w1q"])
        for t, (d, q) in zip(ds.times, ds.values):
            writer.writerow([repr(float(t)), repr(float(d)), repr(float(q))])


def load_csv(path, window_cap=200) -> GpDataset:
    """Read a dataset written by :func:`dump_csv`."""
    times, values = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["time", "w1d", "w1q"]:
            raise GpError("unexpected dataset CSV header")
        for row in reader:
            times.append(float(row[0]))
            values.append((float(row[1]), float(row[2])))
    times = np.asarray(times)
    values = np.asarray(values).reshape(-1, 2)
    if times.size > window_cap:
        times = times[-window_cap:]
        values = values[-window_cap:]
    return GpDataset(times=times, values=values, window_cap=window_cap)
