"""Event-driven simulation of the M/G/1 FIFO system with covert insertions.

One server, FIFO, non-preemptive.  The legitimate ("Willie") stream is
Poisson; the adversary ("Alice") inserts jobs according to her policy:

- NoInsertion: the null system.
- IEBP(q): one job with probability q at the end of each Willie busy
  period (W-BP), including time zero.
- II(q): at every idle onset (server has nothing at all to serve) one
  job with probability q; when it completes and the system is still
  empty the coin is flipped again.
- IIA(q, batch): II behaviour at idle onsets plus, right after each
  Willie arrival, a batch of size s with probability q*batch.probs[s].
- IIAGeometric(q, a): geometric(mean 1/a) batches both at idle onsets
  and after each Willie arrival, each with probability q.

The simulator records ground-truth adversary activity alongside the
Willie-observable projection (arrival/departure reconstructed services);
detectors must consume only the latter.  A run is strictly sequential;
parallelism comes from independently seeded runs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .analytics import BatchPMF, SystemParams
from .errors import DomainError, MalformedTraceError, RunawayError, StabilityError
from .streams import substream

__all__ = [
    "NoInsertion",
    "IEBP",
    "II",
    "IIA",
    "IIAGeometric",
    "Policy",
    "BusyPeriodObs",
    "SimRun",
    "validate_policy",
    "run",
    "reconstruct_services",
    "extract_yv",
    "pick_random_job",
    "write_trace",
    "read_trace",
    "policy_from_json",
    "policy_to_json",
]

_RUNAWAY_GUARD = 10**6
_CHUNK = 1 << 14
_INF = math.inf


@dataclass(frozen=True)
class NoInsertion:
    pass


@dataclass(frozen=True)
class IEBP:
    q: float


@dataclass(frozen=True)
class II:
    q: float


@dataclass(frozen=True)
class IIA:
    q: float
    batch: BatchPMF


@dataclass(frozen=True)
class IIAGeometric:
    q: float
    a: float  # per-job continuation parameter; batch mean 1/a


Policy = Union[NoInsertion, IEBP, II, IIA, IIAGeometric]


def validate_policy(policy: Policy, params: SystemParams) -> None:
    """Range checks plus the insert-at-arrivals stability condition."""
    q = getattr(policy, "q", 0.0)
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must be in [0, 1], got {q}")
    if isinstance(policy, IIAGeometric) and not 0.0 < policy.a <= 1.0:
        raise DomainError(f"a must be in (0, 1], got {policy.a}")
    if isinstance(policy, IIA):
        b = policy.batch.mean
        if params.rho1 + q * params.rho2 * b >= 1.0:
            raise StabilityError(
                f"rho1 + q*rho2*B = {params.rho1 + q * params.rho2 * b:.6g} >= 1: unstable"
            )
    if isinstance(policy, IIAGeometric):
        b = 1.0 / policy.a
        if params.rho1 + q * params.rho2 * b >= 1.0:
            raise StabilityError("geometric batches violate rho1 + q*rho2*B < 1")


def policy_from_json(obj: dict) -> Policy:
    kind = obj.get("kind")
    if kind == "none":
        return NoInsertion()
    if kind == "iebp":
        return IEBP(q=float(obj["q"]))
    if kind == "ii":
        return II(q=float(obj["q"]))
    if kind == "iia":
        return IIA(q=float(obj["q"]), batch=BatchPMF(tuple(obj["batch"]["probs"])))
    if kind == "iia_geometric":
        return IIAGeometric(q=float(obj["q"]), a=float(obj["a"]))
    raise DomainError(f"unknown policy kind {kind!r}")


def policy_to_json(policy: Policy) -> dict:
    if isinstance(policy, NoInsertion):
        return {"kind": "none"}
    if isinstance(policy, IEBP):
        return {"kind": "iebp", "q": policy.q}
    if isinstance(policy, II):
        return {"kind": "ii", "q": policy.q}
    if isinstance(policy, IIA):
        return {"kind": "iia", "q": policy.q, "batch": policy.batch.to_json()}
    if isinstance(policy, IIAGeometric):
        return {"kind": "iia_geometric", "q": policy.q, "a": policy.a}
    raise DomainError(f"not a policy: {policy!r}")


@dataclass
class BusyPeriodObs:
    """Willie-observable record of one W-BP.

    ``y`` is the reconstructed service of the first job, ``v`` the idle
    stretch preceding the W-BP; ``services`` are reconstructed, so
    adversary interference shows up as inflation of the first entry.
    """

    n_jobs: int
    arrivals: np.ndarray
    services: np.ndarray
    y: float
    v: float


@dataclass
class SimRun:
    """Aggregate of a simulated stretch of n complete W-BPs.

    Per-BP observables are stored flat (``arrivals``/``services`` indexed
    by ``bp_offsets``) when the run keeps traces; ``bps`` materializes
    BusyPeriodObs views on demand.
    """

    seed: int
    n_bps: int
    n_jobs: np.ndarray
    y: np.ndarray
    v: np.ndarray
    alice_inserted: int
    alice_served: int
    willie_served: int
    wall_time_simulated: float
    arrivals: Optional[np.ndarray] = None
    services: Optional[np.ndarray] = None
    bp_offsets: Optional[np.ndarray] = None

    @property
    def bps(self) -> list:
        if self.arrivals is None:
            raise ValueError("run was made with store_trace=False; per-job data not kept")
        out = []
        for j in range(self.n_bps):
            lo, hi = self.bp_offsets[j], self.bp_offsets[j + 1]
            out.append(
                BusyPeriodObs(
                    n_jobs=int(self.n_jobs[j]),
                    arrivals=self.arrivals[lo:hi],
                    services=self.services[lo:hi],
                    y=float(self.y[j]),
                    v=float(self.v[j]),
                )
            )
        return out


def _buffered(draw_chunk):
    """Chunked scalar draws: draw_chunk() -> list of floats/ints."""
    buf = draw_chunk()
    n = len(buf)
    idx = 0

    def nxt():
        nonlocal buf, idx, n
        if idx == n:
            buf = draw_chunk()
            n = len(buf)
            idx = 0
        val = buf[idx]
        idx += 1
        return val

    return nxt


def run(
    params: SystemParams,
    policy: Policy,
    n_bps: int,
    seed: int,
    store_trace: bool = True,
) -> SimRun:
    """Simulate exactly n_bps complete W-BPs from an empty system.

    Event order on ties is departure, then arrival, then insertion.
    Identical (params, policy, n_bps, seed) reproduce bit-identical runs.
    """
    if n_bps < 1:
        raise DomainError(f"n_bps must be >= 1, got {n_bps}")
    validate_policy(policy, params)
    rng = substream(seed, 0) if isinstance(seed, int) else np.random.Generator(np.random.PCG64(seed))

    lam = params.lam
    draw_ia = _buffered(lambda: rng.exponential(1.0 / lam, _CHUNK).tolist())
    draw_s1 = _buffered(lambda: np.asarray(params.g1.sample(rng, _CHUNK)).tolist())
    draw_s2 = _buffered(lambda: np.asarray(params.g2.sample(rng, _CHUNK)).tolist())
    draw_u = _buffered(lambda: rng.random(_CHUNK).tolist())

    is_iebp = isinstance(policy, IEBP)
    is_ii = isinstance(policy, II)
    is_iia = isinstance(policy, IIA)
    is_geo = isinstance(policy, IIAGeometric)
    q = getattr(policy, "q", 0.0)
    idle_active = q > 0.0 and (is_iebp or is_ii or is_iia or is_geo)
    draw_batch = None
    if is_iia:
        probs = np.asarray(policy.batch.probs)
        draw_batch = _buffered(lambda: rng.choice(len(probs), p=probs, size=_CHUNK).tolist())
    elif is_geo:
        a = policy.a
        draw_batch = _buffered(lambda: rng.geometric(a, _CHUNK).tolist())

    # per-BP outputs
    out_njobs = np.empty(n_bps, dtype=np.int64)
    out_y = np.empty(n_bps)
    out_v = np.empty(n_bps)
    if store_trace:
        cap = 4 * n_bps + 64
        arr_buf = np.empty(cap)
        svc_buf = np.empty(cap)
        offsets = np.empty(n_bps + 1, dtype=np.int64)
        offsets[0] = 0
        arr_fifo = deque()  # pending Willie arrival times, FIFO
    n_trace = 0

    # adversary jobs are queued as negative service times
    queue = deque()
    t = 0.0
    next_arr = draw_ia()
    serving_kind = 0  # 0 idle, 1 willie, 2 alice
    serving_end = _INF
    willie_in_sys = 0
    last_willie_dep = 0.0
    bp_first_arr = 0.0
    bp_first_pending = False
    v_cur = 0.0
    y_cur = 0.0
    bp_jobs = 0
    bp_index = 0
    alice_inserted = 0
    alice_served = 0
    idle_hook_done = False
    idle_cause_bp_end = True  # time zero counts as a BP boundary

    while True:
        if serving_kind == 0:
            if queue:
                s = queue.popleft()
                if s >= 0.0:
                    serving_kind = 1
                    serving_end = t + s
                else:
                    serving_kind = 2
                    serving_end = t - s
            elif idle_active and not idle_hook_done:
                idle_hook_done = True
                if (not is_iebp or idle_cause_bp_end) and draw_u() < q:
                    if is_geo:
                        k = draw_batch()
                        alice_inserted += k
                        for _ in range(k):
                            queue.append(-draw_s2())
                    else:
                        alice_inserted += 1
                        queue.append(-draw_s2())
                continue

        if next_arr < serving_end:
            # Willie arrival
            t = next_arr
            willie_in_sys += 1
            if willie_in_sys == 1:
                v_cur = t - last_willie_dep
                bp_first_arr = t
                bp_first_pending = True
            if store_trace:
                if n_trace == cap:
                    cap *= 2
                    arr_buf = np.resize(arr_buf, cap)
                    svc_buf = np.resize(svc_buf, cap)
                arr_buf[n_trace] = t
                arr_fifo.append(t)
            queue.append(draw_s1())
            if is_iia:
                if draw_u() < q:
                    k = draw_batch()
                    alice_inserted += k
                    for _ in range(k):
                        queue.append(-draw_s2())
            elif is_geo:
                if draw_u() < q:
                    k = draw_batch()
                    alice_inserted += k
                    for _ in range(k):
                        queue.append(-draw_s2())
            next_arr = t + draw_ia()
            idle_hook_done = False
            if willie_in_sys + len(queue) > _RUNAWAY_GUARD:
                raise RunawayError(
                    f"backlog exceeded {_RUNAWAY_GUARD} jobs at t={t:.6g}; configuration unstable"
                )
        else:
            # service completion
            t = serving_end
            if serving_kind == 1:
                willie_in_sys -= 1
                bp_jobs += 1
                if bp_first_pending:
                    y_cur = t - bp_first_arr
                    bp_first_pending = False
                if store_trace:
                    a_i = arr_fifo.popleft()
                    svc_buf[n_trace] = t - (a_i if a_i > last_willie_dep else last_willie_dep)
                    n_trace += 1
                last_willie_dep = t
                if willie_in_sys == 0:
                    out_njobs[bp_index] = bp_jobs
                    out_y[bp_index] = y_cur
                    out_v[bp_index] = v_cur
                    if store_trace:
                        offsets[bp_index + 1] = n_trace
                    bp_index += 1
                    bp_jobs = 0
                    idle_cause_bp_end = True
                    if bp_index == n_bps:
                        break
            else:
                alice_served += 1
                idle_cause_bp_end = False
            serving_kind = 0
            serving_end = _INF
            idle_hook_done = False

    return SimRun(
        seed=seed if isinstance(seed, int) else -1,
        n_bps=n_bps,
        n_jobs=out_njobs,
        y=out_y,
        v=out_v,
        alice_inserted=alice_inserted,
        alice_served=alice_served,
        willie_served=int(out_njobs.sum()),
        wall_time_simulated=t,
        arrivals=arr_buf[:n_trace].copy() if store_trace else None,
        services=svc_buf[:n_trace].copy() if store_trace else None,
        bp_offsets=offsets if store_trace else None,
    )


def reconstruct_services(arrivals, departures) -> np.ndarray:
    """S_1 = D_1 - A_1; S_i = D_i - max(A_i, D_{i-1}) for i >= 2."""
    a = np.asarray(arrivals, dtype=float)
    d = np.asarray(departures, dtype=float)
    if a.shape != d.shape or a.ndim != 1:
        raise MalformedTraceError("arrivals and departures must be 1-d of equal length")
    if a.size == 0:
        return np.empty(0)
    if np.any(np.diff(a) <= 0) or np.any(np.diff(d) <= 0):
        raise MalformedTraceError("arrival and departure sequences must be strictly increasing")
    if np.any(d <= a):
        raise MalformedTraceError("each departure must be after the matching arrival")
    prev_d = np.concatenate(([0.0], d[:-1]))
    return d - np.maximum(a, prev_d)


def extract_yv(run: SimRun) -> np.ndarray:
    """Per-BP sufficient statistic, one (y, v) row per W-BP in order."""
    if run.n_bps == 0:
        raise DomainError("empty run")
    return np.column_stack([run.y, run.v])


@dataclass
class RandomJobSample:
    """Uniform random job per W-BP (the random-job detector's input)."""

    bp_index: np.ndarray
    job_index: np.ndarray
    service: np.ndarray
    pi_j_hat: float  # empirical fraction with job_index == 0


def pick_random_job(run: SimRun, seed) -> RandomJobSample:
    """Pick one job uniformly at random from each W-BP."""
    if run.services is None:
        raise ValueError("run was made with store_trace=False; per-job data not kept")
    rng = (
        substream(seed, 1)
        if isinstance(seed, int)
        else np.random.Generator(np.random.PCG64(seed))
    )
    u = rng.random(run.n_bps)
    job_idx = np.minimum((u * run.n_jobs).astype(np.int64), run.n_jobs - 1)
    flat = run.bp_offsets[:-1] + job_idx
    return RandomJobSample(
        bp_index=np.arange(run.n_bps, dtype=np.int64),
        job_index=job_idx,
        service=run.services[flat],
        pi_j_hat=float(np.mean(job_idx == 0)),
    )


def write_trace(run: SimRun, path) -> None:
    """One JSON record per W-BP: {bp, n_jobs, v, y, services, arrivals}."""
    with open(path, "w") as fh:
        for j, bp in enumerate(run.bps):
            rec = {
                "bp": j,
                "n_jobs": bp.n_jobs,
                "v": bp.v,
                "y": bp.y,
                "services": [float(s) for s in bp.services],
                "arrivals": [float(a) for a in bp.arrivals],
            }
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list:
    """Inverse of write_trace; returns BusyPeriodObs in file order."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                out.append(
                    BusyPeriodObs(
                        n_jobs=int(rec["n_jobs"]),
                        arrivals=np.asarray(rec["arrivals"], dtype=float),
                        services=np.asarray(rec["services"], dtype=float),
                        y=float(rec["y"]),
                        v=float(rec["v"]),
                    )
                )
            except KeyError as exc:
                raise MalformedTraceError(f"trace record missing key {exc}")
    return out
