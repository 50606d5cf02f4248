"""Likelihood-ratio detection and Monte Carlo error-probability estimation.

The observer tests "no insertions" against a known insertion policy with
known q (matched detector, per the model where both parties know all
service laws).  The test accepts the null iff the summed log likelihood
ratio is <= 0; ties go to the null.  Error probabilities are estimated
by paired Monte Carlo: `trials` independent runs under each hypothesis,
each on an independently seeded substream, so results are reproducible
regardless of execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import analytics as an
from .analytics import BatchPMF, Statistic, SystemParams
from .errors import DomainError, InvalidInputError, UnsupportedCombinationError
from .simqueue import NoInsertion, Policy, SimRun, pick_random_job, run
from .streams import seed_sequence

__all__ = [
    "Hypothesis",
    "DetectorSpec",
    "PEEstimate",
    "loglr",
    "decide",
    "estimate_pe",
    "observations_from_run",
    "observations_from_bps",
    "clamp_count",
]

_CLAMP_FLOOR = 1e-300
_clamps = 0


def clamp_count() -> int:
    """Number of per-sample ratios clamped at the underflow floor so far."""
    return _clamps


class Hypothesis(str, Enum):
    H0 = "H0"
    H1 = "H1"


@dataclass(frozen=True)
class DetectorSpec:
    """What the observer assumes: statistic, insertion probability, and
    (for the random-job detector) the batch law and first-job pick rate."""

    statistic: Statistic
    assumed_q: float
    batch: Optional[BatchPMF] = None
    pi_j: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.assumed_q <= 1.0:
            raise DomainError(
                f"assumed_q must be in (0, 1], got {self.assumed_q} (a q=0 detector is degenerate)"
            )

    def to_json(self) -> dict:
        out = {"statistic": self.statistic.value, "q": self.assumed_q}
        if self.batch is not None:
            out["batch"] = self.batch.to_json()
        if self.pi_j is not None:
            out["pi_j"] = self.pi_j
        return out


def spec_from_json(obj: dict) -> DetectorSpec:
    batch = BatchPMF(tuple(obj["batch"]["probs"])) if "batch" in obj else None
    return DetectorSpec(
        statistic=Statistic(obj["statistic"]),
        assumed_q=float(obj["q"]),
        batch=batch,
        pi_j=float(obj["pi_j"]) if "pi_j" in obj else None,
    )


@dataclass(frozen=True)
class PEEstimate:
    """Empirical false-alarm/missed-detection rates; p_e is their sum
    (chance level 1.0 under equal priors)."""

    p_fa: float
    p_md: float
    p_e: float
    trials: int
    ci_halfwidth: float

    def to_json(self) -> dict:
        return {
            "p_fa": self.p_fa,
            "p_md": self.p_md,
            "p_e": self.p_e,
            "trials": self.trials,
            "ci_halfwidth": self.ci_halfwidth,
        }


def _per_sample_ratio(spec: DetectorSpec, params: SystemParams, obs) -> np.ndarray:
    q = spec.assumed_q
    stat = Statistic(spec.statistic)
    if stat is Statistic.YV:
        yv = np.asarray(obs, dtype=float)
        return 1.0 + q * np.asarray(an.rho(params, yv[:, 0], yv[:, 1]))
    if stat is Statistic.Y_ONLY:
        y = np.asarray(obs, dtype=float)
        num = an._g1_conv_g2hat(params)
        ratio = np.asarray(an._ratio(num, an._g1_poly(params), y))
        return 1.0 + q * (ratio - params.p)
    if stat in (Statistic.II_YV, Statistic.II_Y_ONLY):
        if not isinstance(params.g2, an.Exponential):
            raise UnsupportedCombinationError("insert-at-idle ratios need exponential g2")
        psi = an._psi(params)
        if stat is Statistic.II_YV:
            yv = np.asarray(obs, dtype=float)
            tilt = np.exp(-params.mu2 * (1.0 - q) * yv[:, 1])
            return 1.0 + q * tilt * np.asarray(psi(yv[:, 0]))
        theta = params.p * q / (1.0 - (1.0 - params.p) * q)
        y = np.asarray(obs, dtype=float)
        return 1.0 + theta * np.asarray(psi(y))
    if stat is Statistic.IIA_RANDOM_JOB:
        if spec.batch is None or spec.pi_j is None:
            raise DomainError("the random-job detector needs batch and pi_j in its spec")
        kern = an._WKernel(params, spec.batch, spec.pi_j)
        y = np.asarray(obs, dtype=float)
        return np.asarray(kern.w(q, y))
    raise UnsupportedCombinationError(f"unknown statistic {stat}")


def loglr(spec: DetectorSpec, params: SystemParams, obs) -> float:
    """Summed log of the per-sample ratio f1/f0 for the chosen statistic.

    Ratios that underflow to <= 0 (impossible analytically for valid q)
    are clamped at 1e-300 and counted; see clamp_count().
    """
    global _clamps
    z = _per_sample_ratio(spec, params, obs)
    bad = int(np.count_nonzero(z < _CLAMP_FLOOR))
    if bad:
        _clamps += bad
        z = np.maximum(z, _CLAMP_FLOOR)
    return float(np.log(z).sum())


def decide(llr: float) -> Hypothesis:
    """Reject the null iff llr > 0; the tie llr == 0 keeps the null."""
    if not math.isfinite(llr):
        raise InvalidInputError(f"log likelihood ratio must be finite, got {llr}")
    return Hypothesis.H1 if llr > 0.0 else Hypothesis.H0


def observations_from_run(spec: DetectorSpec, sim: SimRun, pick_seed=0):
    """Project a run onto the observable the detector consumes."""
    stat = Statistic(spec.statistic)
    if stat in (Statistic.YV, Statistic.II_YV):
        return np.column_stack([sim.y, sim.v])
    if stat in (Statistic.Y_ONLY, Statistic.II_Y_ONLY):
        return sim.y
    if stat is Statistic.IIA_RANDOM_JOB:
        return pick_random_job(sim, pick_seed).service
    raise UnsupportedCombinationError(f"unknown statistic {stat}")


def observations_from_bps(spec: DetectorSpec, bps: Sequence, pick_seed: int = 0):
    """Same projection for trace records read back from JSON lines."""
    stat = Statistic(spec.statistic)
    y = np.array([bp.y for bp in bps])
    v = np.array([bp.v for bp in bps])
    if stat in (Statistic.YV, Statistic.II_YV):
        return np.column_stack([y, v])
    if stat in (Statistic.Y_ONLY, Statistic.II_Y_ONLY):
        return y
    if stat is Statistic.IIA_RANDOM_JOB:
        from .streams import substream

        rng = substream(pick_seed, 1)
        out = np.empty(len(bps))
        for j, bp in enumerate(bps):
            out[j] = bp.services[rng.integers(bp.n_jobs)]
        return out
    raise UnsupportedCombinationError(f"unknown statistic {stat}")


def estimate_pe(
    params: SystemParams,
    policy: Policy,
    spec: DetectorSpec,
    n_bps: int,
    trials: int,
    seed: int,
) -> PEEstimate:
    """Monte Carlo estimate of P_FA + P_MD for the matched detector.

    Runs `trials` simulations under the null and `trials` under the
    policy; each trial consumes its own substream (seed, hypothesis,
    trial index), so the estimate is independent of scheduling.
    """
    if trials < 100:
        raise DomainError(f"need at least 100 trials for a usable estimate, got {trials}")
    needs_trace = Statistic(spec.statistic) is Statistic.IIA_RANDOM_JOB
    rejections = 0
    acceptances = 0
    for hyp, pol in ((0, NoInsertion()), (1, policy)):
        for k in range(trials):
            sim = run(
                params,
                pol,
                n_bps,
                seed=seed_sequence(seed, hyp, k),
                store_trace=needs_trace,
            )
            obs = observations_from_run(spec, sim, pick_seed=seed_sequence(seed, hyp, k, 1))
            verdict = decide(loglr(spec, params, obs))
            if hyp == 0 and verdict is Hypothesis.H1:
                rejections += 1
            elif hyp == 1 and verdict is Hypothesis.H0:
                acceptances += 1
    p_fa = rejections / trials
    p_md = acceptances / trials
    ci = 1.96 * math.sqrt(p_fa * (1.0 - p_fa) / trials + p_md * (1.0 - p_md) / trials)
    return PEEstimate(p_fa=p_fa, p_md=p_md, p_e=p_fa + p_md, trials=trials, ci_halfwidth=ci)
