"""3-D zonal swimmer model with self-driven and policy-driven stepping.

Each swimmer carries a unit heading and moves at constant speed. The
self-driven mode computes a wished direction from repulsion, orientation
and attraction zones, perturbs it with angular noise, and turns toward it
under a per-step turn limit. The policy-driven mode applies explicit
(yaw, pitch) increments. Both modes share the same turn primitive so model
rollouts can be replayed exactly through recorded actions.

Conventions (fixed, observation features depend on them):
  * body frame: x-axis = heading, z-axis = world-up projected orthogonal
    to the heading, y-axis = z cross x (right-handed);
  * yaw rotates about the world z-axis, pitch about the body y-axis after
    the yaw has been applied (positive pitch raises the heading);
  * headings exactly along world z use the world x-axis as the up
    reference (degenerate but deterministic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

_Z = np.array([0.0, 0.0, 1.0])
_X = np.array([1.0, 0.0, 0.0])
_Y = np.array([0.0, 1.0, 0.0])
_POLE_EPS = 1e-12


@dataclass(frozen=True)
class SwarmConfig:
    n_agents: int = 25
    speed: float = 3.0
    dt: float = 0.1
    r_repulsion: float = 1.0
    r_orientation: float = 4.0
    r_attraction: float = 12.0
    noise_sigma: float = 0.35
    max_turn: float = math.radians(4.0)
    n_steps: int = 1000
    k_neighbors: int = 7
    init_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.r_repulsion < self.r_orientation < self.r_attraction):
            raise ValueError("zone radii must satisfy 0 < r_r < r_o < r_a")
        if self.speed <= 0 or self.dt <= 0 or self.max_turn <= 0:
            raise ValueError("speed, dt and max_turn must be positive")
        if self.k_neighbors >= self.n_agents:
            raise ValueError("k_neighbors must be smaller than the agent count")

    @property
    def spawn_radius(self) -> float:
        return self.init_radius if self.init_radius is not None else self.r_attraction

    @property
    def obs_dim(self) -> int:
        return 5 * self.k_neighbors

    def with_radii(self, radii) -> "SwarmConfig":
        r_r, r_o, r_a = (float(r) for r in radii)
        return replace(self, r_repulsion=r_r, r_orientation=r_o, r_attraction=r_a)


@dataclass
class SwarmState:
    positions: np.ndarray  # (N, 3)
    headings: np.ndarray  # (N, 3), unit rows
    t: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "SwarmState":
        return SwarmState(self.positions.copy(), self.headings.copy(), self.t)


def init_state(config: SwarmConfig, rng: np.random.Generator) -> SwarmState:
    """Positions uniform in a ball, headings uniform on the unit sphere."""
    n = config.n_agents
    direc = rng.normal(size=(n, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    radii = config.spawn_radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    positions = direc * radii
    headings = rng.normal(size=(n, 3))
    headings /= np.linalg.norm(headings, axis=1, keepdims=True)
    return SwarmState(positions=positions, headings=headings, t=0)


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    out = np.remainder(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


def heading_angles(h) -> tuple:
    """(azimuth, elevation) of a unit vector; azimuth 0 at the pole."""
    h = np.asarray(h, dtype=float)
    phi = math.atan2(h[1], h[0])
    theta = math.asin(min(1.0, max(-1.0, h[2])))
    return phi, theta


def _pitch_axis(h: np.ndarray) -> np.ndarray:
    """Body y-axis: horizontal, orthogonal to the heading."""
    axis = np.array([-h[1], h[0], 0.0])
    n = math.hypot(axis[0], axis[1])
    if n < _POLE_EPS:
        return _Y.copy()
    return axis / n


def body_frame(h: np.ndarray):
    """Orthonormal (x, y, z) body axes for a unit heading."""
    bx = h
    if abs(h[2]) > 1.0 - _POLE_EPS:
        up = _X
    else:
        up = _Z
    bz = up - (up @ bx) * bx
    bz /= np.linalg.norm(bz)
    by = np.cross(bz, bx)
    return bx, by, bz


def apply_turn(h: np.ndarray, dphi: float, dtheta: float) -> np.ndarray:
    """Yaw about world z by dphi, then pitch the result by dtheta."""
    if dphi != 0.0:
        c, s = math.cos(dphi), math.sin(dphi)
        h = np.array([c * h[0] - s * h[1], s * h[0] + c * h[1], h[2]])
    if dtheta != 0.0:
        by = _pitch_axis(h)
        bz = np.cross(h, by)
        h = math.cos(dtheta) * h + math.sin(dtheta) * bz
    return h


def heading_change_to_action(h_old: np.ndarray, h_new: np.ndarray) -> tuple:
    """(dphi, dtheta) such that apply_turn(h_old, dphi, dtheta) == h_new."""
    phi0, th0 = heading_angles(h_old)
    phi1, th1 = heading_angles(h_new)
    return wrap_angle(phi1 - phi0), th1 - th0


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return c * v + s * np.cross(axis, v) + (1.0 - c) * (axis @ v) * axis


def rotate_toward(current: np.ndarray, target: np.ndarray, max_angle: float) -> np.ndarray:
    """Rotate `current` toward `target` by at most max_angle (great circle).

    Antipodal targets pick a deterministic orthogonal rotation plane.
    """
    dot = float(current @ target)
    cr = np.cross(current, target)
    sin = float(np.linalg.norm(cr))
    angle = math.atan2(sin, dot)
    if angle <= max_angle:
        return target
    if sin < _POLE_EPS:
        # target is (anti)parallel: choose the horizontal plane when possible
        axis = np.cross(current, _Z)
        n = np.linalg.norm(axis)
        if n < _POLE_EPS:
            axis = np.cross(current, _X)
            n = np.linalg.norm(axis)
        axis = axis / n
    else:
        axis = cr / sin
    return _rotate_about(current, axis, max_angle)


def wished_direction(state: SwarmState, i: int, config: SwarmConfig) -> np.ndarray:
    """Zonal desired direction for agent i.

    Any neighbor inside the repulsion radius dominates; otherwise the
    normalized orientation and attraction sums are added. Empty zones
    contribute nothing, and a fully empty neighborhood (or an exact
    cancellation) keeps the current heading.
    """
    disp = state.positions - state.positions[i]
    dist = np.linalg.norm(disp, axis=1)
    dist[i] = np.inf

    rep = dist < config.r_repulsion
    if rep.any():
        s = disp[rep].sum(axis=0)
        n = np.linalg.norm(s)
        if n < _POLE_EPS:
            return state.headings[i].copy()
        return -s / n

    v = np.zeros(3)
    orient = (dist >= config.r_repulsion) & (dist < config.r_orientation)
    if orient.any():
        s = state.headings[orient].sum(axis=0)
        n = np.linalg.norm(s)
        if n >= _POLE_EPS:
            v += s / n
    attract = (dist >= config.r_orientation) & (dist < config.r_attraction)
    if attract.any():
        s = disp[attract].sum(axis=0)
        n = np.linalg.norm(s)
        if n >= _POLE_EPS:
            v += s / n

    n = np.linalg.norm(v)
    if n < _POLE_EPS:
        return state.headings[i].copy()
    return v / n


def _wished_directions(state: SwarmState, config: SwarmConfig) -> np.ndarray:
    """Vectorized wished directions for all agents (matches wished_direction)."""
    pos, hdg = state.positions, state.headings
    disp = pos[None, :, :] - pos[:, None, :]  # disp[i, j] = x_j - x_i
    dist = np.linalg.norm(disp, axis=2)
    np.fill_diagonal(dist, np.inf)

    rep = dist < config.r_repulsion
    orient = (dist >= config.r_repulsion) & (dist < config.r_orientation)
    attract = (dist >= config.r_orientation) & (dist < config.r_attraction)

    rep_sum = np.einsum("ij,ijk->ik", rep.astype(float), disp)
    orient_sum = orient.astype(float) @ hdg
    attract_sum = np.einsum("ij,ijk->ik", attract.astype(float), disp)

    o_norm = np.linalg.norm(orient_sum, axis=1, keepdims=True)
    a_norm = np.linalg.norm(attract_sum, axis=1, keepdims=True)
    v = np.where(o_norm >= _POLE_EPS, orient_sum / np.maximum(o_norm, _POLE_EPS), 0.0)
    v = v + np.where(a_norm >= _POLE_EPS, attract_sum / np.maximum(a_norm, _POLE_EPS), 0.0)
    v_norm = np.linalg.norm(v, axis=1, keepdims=True)
    free = np.where(v_norm >= _POLE_EPS, v / np.maximum(v_norm, _POLE_EPS), hdg)

    r_norm = np.linalg.norm(rep_sum, axis=1, keepdims=True)
    repelled = np.where(r_norm >= _POLE_EPS, -rep_sum / np.maximum(r_norm, _POLE_EPS), hdg)

    return np.where(rep.any(axis=1)[:, None], repelled, free)


def _apply_turn_batch(h: np.ndarray, dphi: np.ndarray, dtheta: np.ndarray) -> np.ndarray:
    """Row-wise apply_turn; exact identity for zero increments."""
    c, s = np.cos(dphi), np.sin(dphi)
    h1 = np.stack([c * h[:, 0] - s * h[:, 1], s * h[:, 0] + c * h[:, 1], h[:, 2]], axis=1)
    ax = np.stack([-h1[:, 1], h1[:, 0], np.zeros(len(h1))], axis=1)
    n = np.linalg.norm(ax, axis=1, keepdims=True)
    ax = np.where(n >= _POLE_EPS, ax / np.maximum(n, _POLE_EPS), _Y)
    bz = np.cross(h1, ax)
    ct, st = np.cos(dtheta)[:, None], np.sin(dtheta)[:, None]
    return ct * h1 + st * bz


def _heading_angles_batch(h: np.ndarray):
    phi = np.arctan2(h[:, 1], h[:, 0])
    theta = np.arcsin(np.clip(h[:, 2], -1.0, 1.0))
    return phi, theta


def _rotate_toward_batch(current: np.ndarray, target: np.ndarray, max_angle: float) -> np.ndarray:
    dot = np.sum(current * target, axis=1)
    cr = np.cross(current, target)
    sin = np.linalg.norm(cr, axis=1)
    angle = np.arctan2(sin, dot)

    fb = np.cross(current, _Z)
    fb_n = np.linalg.norm(fb, axis=1, keepdims=True)
    fb2 = np.cross(current, _X)
    fb2_n = np.linalg.norm(fb2, axis=1, keepdims=True)
    fallback = np.where(fb_n >= _POLE_EPS, fb / np.maximum(fb_n, _POLE_EPS), fb2 / np.maximum(fb2_n, _POLE_EPS))
    axis = np.where(sin[:, None] >= _POLE_EPS, cr / np.maximum(sin, _POLE_EPS)[:, None], fallback)

    c, s = math.cos(max_angle), math.sin(max_angle)
    rotated = c * current + s * np.cross(axis, current) + (1.0 - c) * np.sum(axis * current, axis=1)[:, None] * axis
    return np.where((angle <= max_angle)[:, None], target, rotated)


def _orthobasis(u: np.ndarray):
    """Two unit vectors orthogonal to u (and to each other)."""
    ref = _Z if abs(u[2]) < 0.9 else _X
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def model_step_actions(state: SwarmState, config: SwarmConfig, rng: np.random.Generator):
    """Advance the self-driven model one step; also return realized actions.

    All agents update synchronously from the pre-step state. The realized
    heading change of each agent is expressed in (yaw, pitch) action
    coordinates and clipped to the turn limit before being applied, so the
    returned actions replayed through policy_step reproduce the exact same
    trajectory.
    """
    n = state.n_agents
    wished = _wished_directions(state, config)
    psi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    beta = rng.normal(0.0, config.noise_sigma, size=n)

    ref = np.where(np.abs(wished[:, 2:3]) < 0.9, _Z, _X)
    e1 = np.cross(wished, ref)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(wished, e1)
    axis = np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2
    cb, sb = np.cos(beta)[:, None], np.sin(beta)[:, None]
    noisy = cb * wished + sb * np.cross(axis, wished) + (1.0 - cb) * np.sum(axis * wished, axis=1)[:, None] * axis

    target = _rotate_toward_batch(state.headings, noisy, config.max_turn)
    phi0, th0 = _heading_angles_batch(state.headings)
    phi1, th1 = _heading_angles_batch(target)
    dphi = np.clip(wrap_angle(phi1 - phi0), -config.max_turn, config.max_turn)
    dtheta = np.clip(th1 - th0, -config.max_turn, config.max_turn)
    actions = np.stack([dphi, dtheta], axis=1)

    new_headings = _apply_turn_batch(state.headings, dphi, dtheta)
    positions = state.positions + config.dt * config.speed * new_headings
    return SwarmState(positions, new_headings, state.t + 1), actions


def model_step(state: SwarmState, config: SwarmConfig, rng: np.random.Generator) -> SwarmState:
    new_state, _ = model_step_actions(state, config, rng)
    return new_state


def policy_step(state: SwarmState, actions: np.ndarray, config: SwarmConfig) -> SwarmState:
    """Apply one (yaw, pitch) action per agent, synchronously."""
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (state.n_agents, 2):
        raise ValueError(f"expected actions of shape ({state.n_agents}, 2), got {actions.shape}")
    if not np.all(np.isfinite(actions)):
        raise ValueError("non-finite action entries")
    clipped = np.clip(actions, -config.max_turn, config.max_turn)
    new_headings = _apply_turn_batch(state.headings, clipped[:, 0], clipped[:, 1])
    positions = state.positions + config.dt * config.speed * new_headings
    return SwarmState(positions, new_headings, state.t + 1)


def observe(state: SwarmState, i: int, config: SwarmConfig) -> np.ndarray:
    """Body-frame features of the k nearest neighbors of agent i.

    Per neighbor, sorted by ascending distance (ties by agent index):
    [distance, azimuth, elevation, relative-heading azimuth,
    relative-heading elevation].
    """
    disp = state.positions - state.positions[i]
    dist = np.linalg.norm(disp, axis=1)
    dist[i] = np.inf
    order = np.argsort(dist, kind="stable")[: config.k_neighbors]

    bx, by, bz = body_frame(state.headings[i])
    feats = np.empty(5 * config.k_neighbors)
    for slot, j in enumerate(order):
        d = disp[j]
        r = dist[j]
        dx, dy, dz = d @ bx, d @ by, d @ bz
        hj = state.headings[j]
        hx, hy, hz = hj @ bx, hj @ by, hj @ bz
        feats[5 * slot] = r
        feats[5 * slot + 1] = wrap_angle(math.atan2(dy, dx))
        feats[5 * slot + 2] = math.asin(min(1.0, max(-1.0, dz / r)))
        feats[5 * slot + 3] = wrap_angle(math.atan2(hy, hx))
        feats[5 * slot + 4] = math.asin(min(1.0, max(-1.0, hz)))
    return feats


def observe_all(state: SwarmState, config: SwarmConfig) -> np.ndarray:
    """Vectorized observe() for every agent at once (training hot path)."""
    n, k = state.n_agents, config.k_neighbors
    pos, hdg = state.positions, state.headings
    disp = pos[None, :, :] - pos[:, None, :]
    dist = np.linalg.norm(disp, axis=2)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]  # (n, k)

    bx = hdg
    up = np.where(np.abs(hdg[:, 2:3]) > 1.0 - _POLE_EPS, _X, _Z)
    bz = up - np.sum(up * bx, axis=1, keepdims=True) * bx
    bz /= np.linalg.norm(bz, axis=1, keepdims=True)
    by = np.cross(bz, bx)

    rows = np.arange(n)[:, None]
    d = disp[rows, order]  # (n, k, 3)
    r = dist[rows, order]  # (n, k)
    hj = hdg[order]  # (n, k, 3)

    dx = np.einsum("nkc,nc->nk", d, bx)
    dy = np.einsum("nkc,nc->nk", d, by)
    dz = np.einsum("nkc,nc->nk", d, bz)
    hx = np.einsum("nkc,nc->nk", hj, bx)
    hy = np.einsum("nkc,nc->nk", hj, by)
    hz = np.einsum("nkc,nc->nk", hj, bz)

    feats = np.empty((n, 5 * k))
    feats[:, 0::5] = r
    feats[:, 1::5] = wrap_angle(np.arctan2(dy, dx))
    feats[:, 2::5] = np.arcsin(np.clip(dz / r, -1.0, 1.0))
    feats[:, 3::5] = wrap_angle(np.arctan2(hy, hx))
    feats[:, 4::5] = np.arcsin(np.clip(hz, -1.0, 1.0))
    return feats


def order_parameters(state: SwarmState) -> tuple:
    """(rotation, polarization), both in [0, 1].

    Rotation is the mean norm of radial-cross-heading about the centroid;
    an agent sitting exactly on the centroid contributes zero.
    """
    n = state.n_agents
    mu = state.positions.mean(axis=0)
    rel = state.positions - mu
    norms = np.linalg.norm(rel, axis=1)
    ok = norms > 1e-12
    unit_rel = np.zeros_like(rel)
    unit_rel[ok] = rel[ok] / norms[ok, None]
    rotation = float(np.linalg.norm(np.cross(unit_rel, state.headings).sum(axis=0)) / n)
    polarization = float(np.linalg.norm(state.headings.sum(axis=0)) / n)
    return rotation, polarization
