"""Seam fusion of overlapping classified subdomains.

Adjacent subdomains share a 4-slice overlap carrying two label observations.
Each overlap strip becomes a small lattice random field whose edge and node
potentials reward label (pairs) seen in both observations, and the
maximum-posterior joint labeling is found by simulated annealing. Slices are
assembled progressively from the top-left subimage; axial overlaps are split
evenly between the two subdomains, mirroring the annealer's composite
initialization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .volume import BG, LabelVolume

logger = logging.getLogger(__name__)

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(fn):
            return fn

        return wrap

N_STATES = 4  # CSF, GM, WM, BG encoded as 0..3 inside the annealer

EDGE_BOTH = 1.0
EDGE_ONE = 0.5
EDGE_NONE = 0.01
NODE_BOTH = 1.0
NODE_ONE = 0.5
NODE_NONE = 0.01
W_BOUNDARY = 0.75
W_INTERIOR = 0.25


@dataclass(frozen=True)
class StitchProblem:
    """One overlap strip with its two label observations.

    orientation "horizontal" means a left/right subimage pair (the strip is
    a few columns wide and obs_a is the left observation); "vertical" means
    an upper/lower pair (obs_a on top). Labels are 1..4.
    """

    orientation: str
    obs_a: np.ndarray
    obs_b: np.ndarray

    def __post_init__(self):
        if self.orientation not in ("horizontal", "vertical"):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        a = np.asarray(self.obs_a, dtype=np.uint8)
        b = np.asarray(self.obs_b, dtype=np.uint8)
        if a.shape != b.shape or a.ndim != 2:
            raise ValueError(
                f"observations must be equal 2D patches, got {a.shape} vs {b.shape}")
        object.__setattr__(self, "obs_a", a)
        object.__setattr__(self, "obs_b", b)

    @property
    def shape(self):
        return self.obs_a.shape


@dataclass
class PotentialTables:
    """Edge tables Psi (one 4x4 table per lattice edge) and node tables Phi.

    psi_h[r, c] couples nodes (r, c) and (r, c+1); psi_v[r, c] couples
    (r, c) and (r+1, c); phi[r, c] weighs node (r, c). All entries are
    strictly positive products of the tabulated constants.
    """

    psi_h: np.ndarray
    psi_v: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric cooling schedule for the overlap annealer."""

    t0: float = 1.0
    rho: float = 0.95
    sweeps: int = 20
    t_min: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ValueError("cooling factor must lie in (0, 1)")
        if not (self.t0 > self.t_min > 0.0):
            raise ValueError("need t0 > t_min > 0")

    @property
    def n_temperatures(self) -> int:
        return int(math.floor(math.log(self.t_min / self.t0) / math.log(self.rho))) + 1


def build_potentials(p: StitchProblem) -> PotentialTables:
    """Potential tables from the two observations.

    Edge pairs observed in both patches score 1, in exactly one patch 0.5,
    otherwise 0.01; node labels likewise, scaled by 3/4 on the strip's
    authoritative boundary (outer columns for a horizontal strip, outer rows
    for a vertical one) and 1/4 elsewhere.
    """
    h, w = p.shape
    a = p.obs_a.astype(np.int64) - 1
    b = p.obs_b.astype(np.int64) - 1

    psi_h = np.full((h, max(w - 1, 0), N_STATES, N_STATES), EDGE_NONE)
    if w > 1:
        rr, cc = np.meshgrid(np.arange(h), np.arange(w - 1), indexing="ij")
        pa1, pa2 = a[:, :-1], a[:, 1:]
        pb1, pb2 = b[:, :-1], b[:, 1:]
        psi_h[rr, cc, pa1, pa2] = EDGE_ONE
        agree = (pa1 == pb1) & (pa2 == pb2)
        psi_h[rr, cc, pb1, pb2] = np.where(agree, EDGE_BOTH, EDGE_ONE)

    psi_v = np.full((max(h - 1, 0), w, N_STATES, N_STATES), EDGE_NONE)
    if h > 1:
        rr, cc = np.meshgrid(np.arange(h - 1), np.arange(w), indexing="ij")
        pa1, pa2 = a[:-1, :], a[1:, :]
        pb1, pb2 = b[:-1, :], b[1:, :]
        psi_v[rr, cc, pa1, pa2] = EDGE_ONE
        agree = (pa1 == pb1) & (pa2 == pb2)
        psi_v[rr, cc, pb1, pb2] = np.where(agree, EDGE_BOTH, EDGE_ONE)

    phi = np.full((h, w, N_STATES), NODE_NONE)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    phi[rr, cc, a] = NODE_ONE
    phi[rr, cc, b] = np.where(a == b, NODE_BOTH, NODE_ONE)
    weight = np.full((h, w), W_INTERIOR)
    if p.orientation == "horizontal":
        weight[:, 0] = W_BOUNDARY
        weight[:, -1] = W_BOUNDARY
    else:
        weight[0, :] = W_BOUNDARY
        weight[-1, :] = W_BOUNDARY
    phi *= weight[:, :, None]
    return PotentialTables(psi_h=psi_h, psi_v=psi_v, phi=phi)


def log_posterior(config: np.ndarray, pt: PotentialTables) -> float:
    """Unnormalized log posterior of a label patch under the tables."""
    c = np.asarray(config, dtype=np.int64) - 1
    if c.shape != pt.phi.shape[:2]:
        raise ValueError(f"config shape {c.shape} does not match tables {pt.phi.shape[:2]}")
    h, w = c.shape
    total = 0.0
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    total += float(np.log(pt.phi[rr, cc, c]).sum())
    if w > 1:
        rr, cc = np.meshgrid(np.arange(h), np.arange(w - 1), indexing="ij")
        total += float(np.log(pt.psi_h[rr, cc, c[:, :-1], c[:, 1:]]).sum())
    if h > 1:
        rr, cc = np.meshgrid(np.arange(h - 1), np.arange(w), indexing="ij")
        total += float(np.log(pt.psi_v[rr, cc, c[:-1, :], c[1:, :]]).sum())
    return total


def composite_init(p: StitchProblem) -> np.ndarray:
    """Starting configuration: near half from obs_a, far half from obs_b."""
    h, w = p.shape
    init = p.obs_b.copy()
    if p.orientation == "horizontal":
        init[:, : w // 2] = p.obs_a[:, : w // 2]
    else:
        init[: h // 2, :] = p.obs_a[: h // 2, :]
    return init


@njit(cache=True, nogil=True)
def _anneal_loop(config, log_phi, log_psi_h, log_psi_v, proposals, randu,
                 n_temps, sweeps, t0, rho, best, trace):  # pragma: no cover - jit
    h, w = config.shape
    # exact log posterior of the initial configuration
    lp = 0.0
    for r in range(h):
        for c in range(w):
            lp += log_phi[r, c, config[r, c]]
            if c + 1 < w:
                lp += log_psi_h[r, c, config[r, c], config[r, c + 1]]
            if r + 1 < h:
                lp += log_psi_v[r, c, config[r, c], config[r + 1, c]]
    best_lp = lp
    for r in range(h):
        for c in range(w):
            best[r, c] = config[r, c]

    step = 0
    temp = t0
    for t in range(n_temps):
        for _ in range(sweeps):
            for r in range(h):
                for c in range(w):
                    new = proposals[step]
                    u = randu[step]
                    step += 1
                    old = config[r, c]
                    if new == old:
                        continue
                    delta = log_phi[r, c, new] - log_phi[r, c, old]
                    if c > 0:
                        left = config[r, c - 1]
                        delta += (log_psi_h[r, c - 1, left, new]
                                  - log_psi_h[r, c - 1, left, old])
                    if c + 1 < w:
                        right = config[r, c + 1]
                        delta += (log_psi_h[r, c, new, right]
                                  - log_psi_h[r, c, old, right])
                    if r > 0:
                        up = config[r - 1, c]
                        delta += (log_psi_v[r - 1, c, up, new]
                                  - log_psi_v[r - 1, c, up, old])
                    if r + 1 < h:
                        down = config[r + 1, c]
                        delta += (log_psi_v[r, c, new, down]
                                  - log_psi_v[r, c, old, down])
                    if delta >= 0.0 or u < math.exp(delta / temp):
                        config[r, c] = new
                        lp += delta
                        if lp > best_lp:
                            best_lp = lp
                            for rr in range(h):
                                for cc in range(w):
                                    best[rr, cc] = config[rr, cc]
        trace[t] = best_lp
        temp *= rho
    return best_lp


def simulated_anneal(p: StitchProblem, sched: AnnealSchedule | None = None,
                     tables: PotentialTables | None = None,
                     collect_trace: bool = False):
    """MAP estimate of the overlap labeling by single-site Metropolis cooling.

    Starts from the composite initialization, visits nodes in raster order
    proposing uniform labels, accepts with probability min(1, exp(dlp/T)) and
    geometrically cools until t_min; the best configuration seen is
    returned (its log posterior never drops below the initialization's).
    Deterministic for a fixed schedule seed.
    """
    sched = sched or AnnealSchedule()
    tables = tables or build_potentials(p)
    init = composite_init(p)
    config = (init.astype(np.int64) - 1).astype(np.int8)
    h, w = config.shape
    n_temps = sched.n_temperatures
    n_steps = n_temps * sched.sweeps * h * w

    rng = np.random.default_rng(sched.seed)
    proposals = rng.integers(0, N_STATES, size=n_steps, dtype=np.int8)
    randu = rng.random(n_steps)

    with np.errstate(divide="ignore"):
        log_phi = np.log(tables.phi)
        log_psi_h = np.log(tables.psi_h) if tables.psi_h.size else tables.psi_h
        log_psi_v = np.log(tables.psi_v) if tables.psi_v.size else tables.psi_v
    best = np.empty_like(config)
    trace = np.zeros(n_temps)
    _anneal_loop(config, log_phi, log_psi_h, log_psi_v, proposals, randu,
                 n_temps, sched.sweeps, sched.t0, sched.rho, best, trace)
    result = (best.astype(np.uint8) + 1)
    if collect_trace:
        return result, trace
    return result


# ---------------------------------------------------------------------------
# Slice assembly
# ---------------------------------------------------------------------------

@dataclass
class SliceSubimage:
    """One subdomain's contribution to a slice: inclusive 2D bounds + labels."""

    bounds: tuple[tuple[int, int], tuple[int, int]]
    labels: np.ndarray

    def __post_init__(self):
        (r0, r1), (c0, c1) = self.bounds
        expected = (r1 - r0 + 1, c1 - c0 + 1)
        if self.labels.shape != expected:
            raise ValueError(
                f"patch shape {self.labels.shape} does not match bounds {self.bounds}")


def _runs(flags: np.ndarray):
    """Contiguous index runs where flags is True, as (start, stop) inclusive."""
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([0], breaks + 1))
    stops = np.concatenate((breaks, [idx.size - 1]))
    return [(int(idx[a]), int(idx[b])) for a, b in zip(starts, stops)]


def _problem_seed(base_seed: int, slice_index: int, key: tuple) -> int:
    ss = np.random.SeedSequence(entropy=base_seed,
                                spawn_key=(slice_index,) + tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


def stitch_slice(subimages: list[SliceSubimage], shape: tuple[int, int],
                 sched: AnnealSchedule | None = None, slice_index: int = 0,
                 overlap: int = 4, trace_sink=None) -> np.ndarray:
    """Assemble one slice from overlapping subimages.

    Subimages are placed top-left to bottom-right; wherever a new subimage
    covers already-settled cells, the overlap strip (horizontal strips
    first, then vertical, minus the corner already handled) is re-estimated
    by simulated annealing against the canvas. Raises ValueError on overlap
    widths inconsistent with the expected strip layout or on uncovered
    cells.
    """
    sched = sched or AnnealSchedule()
    canvas = np.zeros(shape, dtype=np.uint8)
    placed = np.zeros(shape, dtype=bool)

    order = sorted(range(len(subimages)), key=lambda i: subimages[i].bounds)
    for si in order:
        sub = subimages[si]
        (r0, r1), (c0, c1) = sub.bounds
        box = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        pm = placed[box]
        patch = sub.labels
        hs, ws = patch.shape
        if not pm.any():
            canvas[box] = patch
            placed[box] = True
            continue

        resolved = np.zeros_like(pm)
        new_content = patch.copy()

        # horizontal strips: the leftmost / rightmost `overlap` columns
        for side, cols in (("left", np.arange(min(overlap, ws))),
                           ("right", np.arange(max(ws - overlap, 0), ws))):
            strip_pm = pm[:, cols]
            full_rows = strip_pm.all(axis=1) & ~resolved[:, cols].any(axis=1)
            for a, b in _runs(full_rows):
                rows = slice(a, b + 1)
                obs_canvas = canvas[box][rows][:, cols]
                obs_patch = patch[rows][:, cols]
                if side == "left":
                    problem = StitchProblem("horizontal", obs_canvas, obs_patch)
                else:
                    problem = StitchProblem("horizontal", obs_patch, obs_canvas)
                seed = _problem_seed(sched.seed, slice_index,
                                     (r0 + a, c0 + int(cols[0]), 0))
                fused = _solve_problem(problem, sched, seed, trace_sink,
                                       (slice_index, r0 + a, c0 + int(cols[0])))
                new_content[rows, cols[0]:cols[-1] + 1] = fused
                resolved[rows, cols[0]:cols[-1] + 1] = True

        # vertical strips: topmost / bottommost rows, corners excluded
        for side, rows_idx in (("top", np.arange(min(overlap, hs))),
                               ("bottom", np.arange(max(hs - overlap, 0), hs))):
            strip_pm = pm[rows_idx, :]
            full_cols = strip_pm.all(axis=0) & ~resolved[rows_idx, :].any(axis=0)
            for a, b in _runs(full_cols):
                cols = slice(a, b + 1)
                obs_canvas = canvas[box][rows_idx][:, cols]
                obs_patch = patch[rows_idx][:, cols]
                if side == "top":
                    problem = StitchProblem("vertical", obs_canvas, obs_patch)
                else:
                    problem = StitchProblem("vertical", obs_patch, obs_canvas)
                seed = _problem_seed(sched.seed, slice_index,
                                     (r0 + int(rows_idx[0]), c0 + a, 1))
                fused = _solve_problem(problem, sched, seed, trace_sink,
                                       (slice_index, r0 + int(rows_idx[0]), c0 + a))
                new_content[rows_idx[0]:rows_idx[-1] + 1, cols] = fused
                resolved[rows_idx[0]:rows_idx[-1] + 1, cols] = True

        leftover = pm & ~resolved
        if leftover.any():
            idx = np.argwhere(leftover)[0]
            raise ValueError(
                f"subimage at bounds {sub.bounds} overlaps settled content at "
                f"local cell {tuple(int(v) for v in idx)} outside any "
                f"{overlap}-wide overlap strip")
        canvas[box] = new_content
        placed[box] = True

    if not placed.all():
        missing = np.argwhere(~placed)
        raise ValueError(
            f"{len(missing)} slice cells not covered by any subimage, "
            f"first at {tuple(int(v) for v in missing[0])}")
    return canvas


def _solve_problem(problem: StitchProblem, sched: AnnealSchedule, seed: int,
                   trace_sink, trace_key):
    if np.array_equal(problem.obs_a, problem.obs_b):
        # agreement is the unique MAP: every factor already maximal
        return problem.obs_a.copy()
    local = AnnealSchedule(t0=sched.t0, rho=sched.rho, sweeps=sched.sweeps,
                           t_min=sched.t_min, seed=seed)
    if trace_sink is not None:
        fused, trace = simulated_anneal(problem, local, collect_trace=True)
        trace_sink(trace_key, trace)
        return fused
    return simulated_anneal(problem, local)


# ---------------------------------------------------------------------------
# Volume assembly
# ---------------------------------------------------------------------------

@dataclass
class ClassifiedFragment:
    """Classified labels over a padded subdomain box.

    core_bounds tile the volume; padded_bounds include the overlap slices;
    labels covers padded_bounds.
    """

    core_bounds: tuple
    padded_bounds: tuple
    labels: np.ndarray

    def __post_init__(self):
        expected = tuple(hi - lo + 1 for lo, hi in self.padded_bounds)
        if self.labels.shape != expected:
            raise ValueError(
                f"fragment labels shape {self.labels.shape} does not match "
                f"padded bounds {self.padded_bounds}")


def stitch_volume(fragments: list[ClassifiedFragment], dims,
                  mask: np.ndarray | None = None,
                  sched: AnnealSchedule | None = None,
                  workers: int = 1, trace_sink=None) -> LabelVolume:
    """Fuse classified fragments into one label volume, slice by slice.

    Axial overlap slices are owned by the nearer fragment (the near half of
    each 4-slice overlap), so each axial slice sees only in-plane overlaps,
    which are re-estimated by simulated annealing. Raises ValueError when a
    voxel is covered by no fragment.
    """
    sched = sched or AnnealSchedule()
    out = np.full(dims, BG, dtype=np.uint8)

    def slice_subimages(k: int) -> list[SliceSubimage]:
        subs = []
        for frag in fragments:
            (ck0, ck1) = frag.core_bounds[2]
            (pk0, _pk1) = frag.padded_bounds[2]
            if not (ck0 <= k <= ck1):
                continue
            (pi0, pi1), (pj0, pj1) = frag.padded_bounds[0], frag.padded_bounds[1]
            subs.append(SliceSubimage(
                bounds=((pi0, pi1), (pj0, pj1)),
                labels=frag.labels[:, :, k - pk0]))
        return subs

    def run(k: int) -> np.ndarray:
        subs = slice_subimages(k)
        if not subs:
            raise ValueError(f"axial slice {k} is covered by no fragment")
        return stitch_slice(subs, dims[:2], sched, slice_index=k,
                            trace_sink=trace_sink)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(dims[2])))
        for k, sl in enumerate(results):
            out[:, :, k] = sl
    else:
        for k in range(dims[2]):
            out[:, :, k] = run(k)

    if mask is not None:
        out[~mask] = BG
        stray = (out == BG) & mask
        if stray.any():
            # annealing proposed background inside the brain; fall back to
            # the first fragment covering each such voxel
            logger.warning("repairing %d background labels inside the mask",
                           int(stray.sum()))
            for frag in fragments:
                box = tuple(slice(lo, hi + 1) for lo, hi in frag.padded_bounds)
                sel = stray[box]
                if sel.any():
                    region = out[box]
                    region[sel] = frag.labels[sel]
                    out[box] = region
                    stray[box] = sel & (frag.labels == BG)
    return LabelVolume(labels=out)
