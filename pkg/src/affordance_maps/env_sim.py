"""2D thruster-vehicle arena with obstacles, fog and force fields.

The vehicle is a disc of radius 0.06 in a 3 x 2 arena. Four throttles push
along fixed diagonal directions; velocity decays by a drag factor that is
larger while the vehicle touches an obstacle or the arena wall. Force fields
add a constant vertical acceleration, and fog corrupts the *observed*
position with Gaussian noise without affecting the true dynamics.

The environment is also rasterised into a per-channel look-up map from
which 11x11 local views are cut for the vision network.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

WIDTH = 3.0
HEIGHT = 2.0
AGENT_RADIUS = 0.06
RESOLUTION = 22  # raster cells per unit; equals the local-view pixel pitch
VIEW_HALF = 5
VIEW_SIZE = 2 * VIEW_HALF + 1

THRUST = 0.0288
DRAG_FREE = 0.15
DRAG_CONTACT = 0.5
FIELD_ACCEL = 0.02
V_MAX = 0.24
FOG_STD = 1.0
CONTACT_EPS = 1e-6
COLLISION_ITERS = 4

# throttle i pushes along DIRECTIONS[i]
DIRECTIONS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]]) / math.sqrt(2.0)

EFFECTS = ("obstacle", "border", "fog", "force_up", "force_down", "decoy")

# index range of cells probed outside the arena before views saturate
_CLAMP = VIEW_HALF + 1
_PAD = _CLAMP + VIEW_HALF


@dataclass(frozen=True)
class Circle:
    channel: int
    center: tuple
    radius: float

    def contains(self, p):
        return (p[0] - self.center[0]) ** 2 + (p[1] - self.center[1]) ** 2 < self.radius ** 2


class EnvironmentSpec:
    """Immutable description of one arena plus its rasterised look-up map.

    ``channels`` tags each map channel with the effect its shapes have on
    the vehicle. The arena wall is drawn (outside the arena) into
    ``border_channel``.
    """

    def __init__(self, channels, shapes, border_channel=0, width=WIDTH, height=HEIGHT,
                 resolution=RESOLUTION, fog_std=FOG_STD, seed=None, name=""):
        self.channels = tuple(channels)
        for tag in self.channels:
            if tag not in EFFECTS:
                raise ValueError(f"unknown channel tag {tag!r}")
        self.shapes = tuple(shapes)
        self.border_channel = int(border_channel)
        self.width = float(width)
        self.height = float(height)
        self.resolution = int(resolution)
        self.fog_std = float(fog_std)
        self.seed = seed
        self.name = name
        for s in self.shapes:
            if not 0 <= s.channel < len(self.channels):
                raise ValueError(f"shape channel {s.channel} out of range")
            x, y = s.center
            if x - s.radius < -1e-9 or y - s.radius < -1e-9 or x + s.radius > self.width + 1e-9 \
                    or y + s.radius > self.height + 1e-9:
                raise ValueError(f"shape {s} leaves the arena")
        self._by_effect = {}
        for effect in EFFECTS:
            sel = [s for s in self.shapes if self.channels[s.channel] == effect]
            self._by_effect[effect] = (
                np.array([s.center for s in sel], dtype=np.float64).reshape(-1, 2),
                np.array([s.radius for s in sel], dtype=np.float64),
            )
        self.rows = int(round(self.height * self.resolution))
        self.cols = int(round(self.width * self.resolution))
        self.raster = self._rasterize()
        self.padded = np.zeros((len(self.channels), self.rows + 2 * _PAD, self.cols + 2 * _PAD))
        self.padded[self.border_channel] = 1.0
        self.padded[:, _PAD:_PAD + self.rows, _PAD:_PAD + self.cols] = self.raster
        self.padded.setflags(write=False)

    @property
    def n_channels(self):
        return len(self.channels)

    def circles(self, effect):
        """``(centers, radii)`` arrays of all shapes with the given effect."""
        return self._by_effect[effect]

    def cell_centers(self):
        """Centres of all raster cells, shaped ``(rows, cols, 2)`` as (x, y)."""
        xs = (np.arange(self.cols) + 0.5) / self.resolution
        ys = (np.arange(self.rows) + 0.5) / self.resolution
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def _rasterize(self):
        centers = self.cell_centers()
        raster = np.zeros((len(self.channels), self.rows, self.cols))
        for s in self.shapes:
            d2 = ((centers - np.asarray(s.center)) ** 2).sum(-1)
            raster[s.channel][d2 < s.radius ** 2] = 1.0
        return raster

    def cell_index(self, positions):
        """Raster ``(row, col)`` of positions, clamped to the probe range."""
        positions = np.asarray(positions, dtype=np.float64)
        col = np.floor(positions[..., 0] * self.resolution).astype(np.int64)
        row = np.floor(positions[..., 1] * self.resolution).astype(np.int64)
        col = np.clip(col, -_CLAMP, self.cols + _CLAMP - 1)
        row = np.clip(row, -_CLAMP, self.rows + _CLAMP - 1)
        return row, col

    def probe_grid_shape(self):
        return self.rows + 2 * _CLAMP, self.cols + 2 * _CLAMP

    def probe_index(self, positions):
        """Flat index into the extended probe grid used by :class:`ContextField`."""
        row, col = self.cell_index(positions)
        return (row + _CLAMP) * (self.cols + 2 * _CLAMP) + (col + _CLAMP)

    def views_at_cells(self, row, col):
        row = np.asarray(row) + _PAD
        col = np.asarray(col) + _PAD
        off = np.arange(-VIEW_HALF, VIEW_HALF + 1)
        r = row[..., None, None] + off[:, None]
        c = col[..., None, None] + off[None, :]
        v = self.padded[:, r, c]  # C, ..., 11, 11
        return np.moveaxis(v, 0, -3)

    def all_probe_views(self):
        """Views for every cell of the extended probe grid, row-major."""
        rows, cols = self.probe_grid_shape()
        rr, cc = np.meshgrid(np.arange(rows) - _CLAMP, np.arange(cols) - _CLAMP, indexing="ij")
        return self.views_at_cells(rr.ravel(), cc.ravel())

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "resolution": self.resolution,
            "channels": list(self.channels),
            "border_channel": self.border_channel,
            "fog_std": self.fog_std,
            "shapes": [
                {"channel": s.channel, "kind": "circle", "center": list(s.center), "radius": s.radius}
                for s in self.shapes
            ],
            "seed": self.seed,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d):
        shapes = []
        for s in d["shapes"]:
            if s.get("kind", "circle") != "circle":
                raise ValueError(f"unsupported shape kind {s.get('kind')!r}")
            shapes.append(Circle(int(s["channel"]), tuple(float(v) for v in s["center"]), float(s["radius"])))
        return cls(
            d["channels"], shapes,
            border_channel=d.get("border_channel", 0),
            width=d.get("width", WIDTH), height=d.get("height", HEIGHT),
            resolution=d.get("resolution", RESOLUTION), fog_std=d.get("fog_std", FOG_STD),
            seed=d.get("seed"), name=d.get("name", ""),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def __eq__(self, other):
        return isinstance(other, EnvironmentSpec) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"EnvironmentSpec(name={self.name!r}, channels={self.channels}, shapes={len(self.shapes)})"


def local_view(spec, position):
    """11x11 per-channel view centred on the raster cell containing ``position``."""
    row, col = spec.cell_index(position)
    return spec.views_at_cells(row, col)


def local_views(spec, positions):
    row, col = spec.cell_index(positions)
    return spec.views_at_cells(row, col)


def inside(spec, effect, p):
    centers, radii = spec.circles(effect)
    if len(radii) == 0:
        return False
    d2 = ((centers - p) ** 2).sum(-1)
    return bool(np.any(d2 < radii ** 2))


@dataclass
class EnvState:
    p: np.ndarray
    u: np.ndarray
    rng: np.random.Generator
    t: int = 0
    touching: tuple = ()
    observed_p: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.observed_p is None:
            self.observed_p = self.p.copy()


@dataclass
class Observation:
    observed_position: np.ndarray
    observed_dp: np.ndarray
    in_fog: bool
    touching: tuple


def make_state(spec, position, seed=0, velocity=(0.0, 0.0)):
    p = np.array(position, dtype=np.float64)
    state = EnvState(p=p, u=np.array(velocity, dtype=np.float64), rng=np.random.default_rng(seed))
    state.touching = _contacts(spec, p)
    return state


def _constraints(spec, p, reach):
    """Arena walls and inflated obstacle discs that can matter near ``p``."""
    r = AGENT_RADIUS
    cons = [("wall", 0, r, 1.0), ("wall", 0, spec.width - r, -1.0),
            ("wall", 1, r, 1.0), ("wall", 1, spec.height - r, -1.0)]
    centers, radii = spec.circles("obstacle")
    if len(radii):
        dist = np.sqrt(((p - centers) ** 2).sum(-1))
        for i in np.nonzero(dist < radii + r + reach)[0]:
            cons.append(("disc", centers[i], radii[i] + r))
    return cons


def _depth_normal(con, p):
    if con[0] == "wall":
        _, axis, value, sign = con
        n = np.zeros(2)
        n[axis] = sign
        return sign * (value - p[axis]), n
    _, c, radius = con
    diff = p - c
    d = math.hypot(diff[0], diff[1])
    n = diff / d if d > 0 else np.array([1.0, 0.0])
    return radius - d, n


def _max_depth(cons, p):
    return max(_depth_normal(con, p)[0] for con in cons)


def _intersections(a, b):
    """Points lying on the boundaries of both constraints."""
    if a[0] == "disc" and b[0] == "wall":
        a, b = b, a
    if a[0] == "wall" and b[0] == "wall":
        if a[1] == b[1]:
            return []
        p = np.zeros(2)
        p[a[1]] = a[2]
        p[b[1]] = b[2]
        return [p]
    if a[0] == "wall":
        _, axis, value, _ = a
        _, c, radius = b
        h2 = radius ** 2 - (value - c[axis]) ** 2
        if h2 < 0:
            return []
        out = []
        for sgn in (-1.0, 1.0):
            p = np.zeros(2)
            p[axis] = value
            p[1 - axis] = c[1 - axis] + sgn * math.sqrt(h2)
            out.append(p)
        return out
    _, c0, r0 = a
    _, c1, r1 = b
    d_vec = c1 - c0
    d = math.hypot(d_vec[0], d_vec[1])
    if d == 0 or d > r0 + r1 or d < abs(r0 - r1):
        return []
    along = (r0 ** 2 - r1 ** 2 + d ** 2) / (2 * d)
    h = math.sqrt(max(r0 ** 2 - along ** 2, 0.0))
    mid = c0 + along * d_vec / d
    perp = np.array([-d_vec[1], d_vec[0]]) / d
    return [mid + h * perp, mid - h * perp]


def _resolve(spec, p_old, p, u):
    """Push ``p`` out of walls and obstacles; returns the corrected ``(p, u)``."""
    cons = _constraints(spec, p, reach=0.5)
    p_free = p
    for _ in range(COLLISION_ITERS):
        worst = max((_depth_normal(con, p) for con in cons), key=lambda t: t[0])
        if worst[0] <= 0:
            break
        p = p + worst[0] * worst[1]
    if _max_depth(cons, p) > 0:
        # narrow wedge: jump to the closest point touching two surfaces at once
        best = None
        for i in range(len(cons)):
            for j in range(i + 1, len(cons)):
                for q in _intersections(cons[i], cons[j]):
                    if _max_depth(cons, q) <= 1e-12:
                        dq = float(np.sum((q - p_free) ** 2))
                        if best is None or dq < best[0]:
                            best = (dq, q)
        if best is None:
            return p_old.copy(), np.zeros(2)
        p = _nudge(cons, best[1])
    for _ in range(2):
        for con in cons:
            depth, n = _depth_normal(con, p)
            if depth > -CONTACT_EPS:
                vn = u @ n
                if vn < 0:
                    u = u - vn * n
    return p, u


def _nudge(cons, p):
    # round-off can leave a point a few ulps inside; step out along the summed normals
    for _ in range(8):
        active = [_depth_normal(con, p) for con in cons]
        active = [(d, n) for d, n in active if d > 0]
        if not active:
            return p
        n = sum(a[1] for a in active)
        norm = math.hypot(n[0], n[1])
        if norm == 0:
            return p
        p = p + (max(a[0] for a in active) + 1e-13) * n / norm
    return p


def clearance(spec, p):
    """Smallest gap between the vehicle at ``p`` and any wall or obstacle (negative = overlap)."""
    return -_max_depth(_constraints(spec, np.asarray(p, dtype=np.float64), reach=np.inf), p)


def _contacts(spec, p):
    r = AGENT_RADIUS + CONTACT_EPS
    touching = []
    if p[0] <= r or p[0] >= spec.width - r or p[1] <= r or p[1] >= spec.height - r:
        touching.append("border")
    centers, radii = spec.circles("obstacle")
    if len(radii) and np.any(np.sqrt(((p - centers) ** 2).sum(-1)) <= radii + r):
        touching.append("obstacle")
    for effect in ("fog", "force_up", "force_down"):
        if inside(spec, effect, p):
            touching.append(effect)
    return tuple(touching)


def step(state, spec, action):
    """Advance one time step; returns ``(new_state, observation)``."""
    a = np.clip(np.asarray(action, dtype=np.float64), 0.0, 1.0)
    p_old = state.p
    acc = THRUST * (a @ DIRECTIONS)
    if inside(spec, "force_up", p_old):
        acc = acc + np.array([0.0, FIELD_ACCEL])
    if inside(spec, "force_down", p_old):
        acc = acc - np.array([0.0, FIELD_ACCEL])
    contact = "obstacle" in state.touching or "border" in state.touching
    u = (state.u + acc) * (1.0 - (DRAG_CONTACT if contact else DRAG_FREE))
    speed = math.hypot(u[0], u[1])
    if speed > V_MAX:
        u = u * (V_MAX / speed)
    p, u = _resolve(spec, p_old, p_old + u, u)
    touching = _contacts(spec, p)
    in_fog = "fog" in touching
    obs_p = p + state.rng.normal(0.0, spec.fog_std, size=2) if in_fog else p.copy()
    new = EnvState(p=p, u=u, rng=state.rng, t=state.t + 1, touching=touching, observed_p=obs_p)
    obs = Observation(obs_p, obs_p - state.observed_p, in_fog, touching)
    return new, obs


def free_position(spec, p, margin=0.0):
    """True if a vehicle centred at ``p`` overlaps neither wall nor obstacle."""
    r = AGENT_RADIUS + margin
    if p[0] < r or p[1] < r or p[0] > spec.width - r or p[1] > spec.height - r:
        return False
    centers, radii = spec.circles("obstacle")
    if len(radii) and np.any(((p - centers) ** 2).sum(-1) < (radii + r) ** 2):
        return False
    return True


def sample_free_position(spec, rng, max_tries=10000):
    for _ in range(max_tries):
        p = rng.uniform([AGENT_RADIUS, AGENT_RADIUS], [spec.width - AGENT_RADIUS, spec.height - AGENT_RADIUS])
        if free_position(spec, p):
            return p
    raise RuntimeError("could not find a free start position")


CORNER_SQUARE = 0.2
CORNER_OFFSET = 0.1


def corner_box(corner, width=WIDTH, height=HEIGHT):
    """Lower-left point of the start square at corner 0..3 (counter-clockwise from lower-left)."""
    lo = CORNER_OFFSET
    hi_x = width - CORNER_OFFSET - CORNER_SQUARE
    hi_y = height - CORNER_OFFSET - CORNER_SQUARE
    return np.array([(lo, lo), (hi_x, lo), (hi_x, hi_y), (lo, hi_y)][corner])


def sample_start_target(rng, corner_pair, width=WIDTH, height=HEIGHT):
    """Start uniform in the square at ``corner_pair``, target in the opposite corner."""
    if corner_pair not in (0, 1, 2, 3):
        raise ValueError("corner_pair must be 0..3")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    start = corner_box(corner_pair, width, height) + rng.uniform(0, CORNER_SQUARE, size=2)
    target = corner_box((corner_pair + 2) % 4, width, height) + rng.uniform(0, CORNER_SQUARE, size=2)
    return start, target


# -- procedural generation -------------------------------------------------

GEN_CHANNELS = ("obstacle", "fog", "force_up", "force_down")
GEN_CLEARANCE = 0.15
GEN_CORNER = 0.4
GEN_RADII = (0.1, 0.5)
GEN_COUNT = (6, 10)
GEN_RETRIES = 500


def _hits_corner(x, y, r, width, height):
    for cx, cy in ((0.0, 0.0), (width - GEN_CORNER, 0.0), (0.0, height - GEN_CORNER),
                   (width - GEN_CORNER, height - GEN_CORNER)):
        qx = min(max(x, cx), cx + GEN_CORNER)
        qy = min(max(y, cy), cy + GEN_CORNER)
        if (x - qx) ** 2 + (y - qy) ** 2 < r * r:
            return True
    return False


def _try_generate(rng, condition, width, height):
    n = int(rng.integers(GEN_COUNT[0], GEN_COUNT[1] + 1))
    kinds = rng.integers(0, len(GEN_CHANNELS), size=n)
    placed = []
    for k in kinds:
        is_field = GEN_CHANNELS[k].startswith("force")
        for _ in range(GEN_RETRIES):
            r = rng.uniform(*GEN_RADII)
            lo = GEN_CLEARANCE + r
            x = rng.uniform(lo, width - lo)
            y = rng.uniform(lo, height - lo)
            if _hits_corner(x, y, r, width, height):
                continue
            ok = True
            for other in placed:
                other_field = GEN_CHANNELS[other.channel].startswith("force")
                if condition == "hard" and (is_field or other_field):
                    continue
                gap = math.hypot(x - other.center[0], y - other.center[1]) - r - other.radius
                if gap < GEN_CLEARANCE:
                    ok = False
                    break
            if ok:
                placed.append(Circle(int(k), (x, y), r))
                break
        else:
            return None
    return placed


def generate_environment(seed, condition="easy", width=WIDTH, height=HEIGHT, max_reseeds=100):
    """Random four-property arena; deterministic in ``seed``.

    Between 6 and 10 circles are placed, each with a property drawn
    uniformly. If rejection sampling gets stuck, the next seed is tried;
    the seed actually used is stored on the returned spec.
    """
    if condition not in ("easy", "hard"):
        raise ValueError("condition must be 'easy' or 'hard'")
    for attempt in range(max_reseeds):
        used = seed + attempt
        shapes = _try_generate(np.random.default_rng(used), condition, width, height)
        if shapes is not None:
            return EnvironmentSpec(GEN_CHANNELS, shapes, border_channel=0, width=width, height=height,
                                   seed=used, name=f"generated-{condition}-{seed}")
    raise RuntimeError(f"environment generation failed for seeds {seed}..{seed + max_reseeds - 1}")


def trajectory_record(state, action, touching):
    return {
        "t": state.t,
        "p": state.p.tolist(),
        "u": state.u.tolist(),
        "a": np.asarray(action, dtype=np.float64).tolist(),
        "observed_p": state.observed_p.tolist(),
        "touching": list(touching),
    }


def write_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def with_fog_std(spec, fog_std):
    d = spec.to_dict()
    d["fog_std"] = fog_std
    return EnvironmentSpec.from_dict(d)

