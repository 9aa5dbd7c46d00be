"""Closed-track geometry in curvilinear coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, LocalizationError

SAMPLE_STEP = 0.1
LOCALIZATION_MARGIN = 2.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True, eq=False)
class Track:
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    curvature: np.ndarray
    half_width_left: np.ndarray
    half_width_right: np.ndarray
    closed: bool = True

    def __post_init__(self):
        if np.any(np.diff(self.s) <= 0) or self.s[0] != 0.0:
            raise InvalidArgument("s must increase strictly from 0")
        if np.any(self.half_width_left <= 0.5) or np.any(self.half_width_right <= 0.5):
            raise InvalidArgument("half-widths must exceed 0.5 m")
        if self.closed:
            gap = math.hypot(self.x[-1] - self.x[0], self.y[-1] - self.y[0])
            dh = abs(wrap_angle(self.heading[-1] - self.heading[0]))
            if gap > 1e-3 or dh > 1e-3:
                raise InvalidArgument("closed track does not close")

    @property
    def length(self):
        return float(self.s[-1])

    def _locate(self, s):
        s = float(s)
        if self.closed:
            s = s % self.length
        elif s < 0.0 or s > self.length:
            raise InvalidArgument(f"s={s} outside open track")
        i = int(np.searchsorted(self.s, s, side="right")) - 1
        i = min(max(i, 0), self.s.size - 2)
        return i, s

    def _lerp(self, arr, s):
        i, s = self._locate(s)
        w = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        return (1.0 - w) * arr[i] + w * arr[i + 1]

    def pose_at(self, s):
        """Centerline (x, y, heading) at s, integrating the local arc."""
        i, s = self._locate(s)
        ds = s - self.s[i]
        seg = self.s[i + 1] - self.s[i]
        h0 = self.heading[i]
        kappa = (self.heading[i + 1] - h0) / seg
        if abs(kappa) < 1e-12:
            return self.x[i] + ds * math.cos(h0), self.y[i] + ds * math.sin(h0), h0
        h = h0 + kappa * ds
        return (
            self.x[i] + (math.sin(h) - math.sin(h0)) / kappa,
            self.y[i] - (math.cos(h) - math.cos(h0)) / kappa,
            h,
        )

    def save(self, path):
        header = (
            f"lbnmpc-track v1\nlength={self.length!r}\nclosed={int(self.closed)}\n"
            "s,x,y,heading,curvature,w_left,w_right"
        )
        data = np.column_stack(
            [self.s, self.x, self.y, self.heading, self.curvature,
             self.half_width_left, self.half_width_right]
        )
        np.savetxt(path, data, delimiter=",", header=header, fmt="%.17g")

    @classmethod
    def load(cls, path):
        closed = True
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                if line.startswith("# closed="):
                    closed = bool(int(line.split("=")[1]))
        d = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls(*(np.ascontiguousarray(d[:, k]) for k in range(7)), closed=closed)


def curvature_at(track, s):
    return float(track._lerp(track.curvature, s))


def bounds_at(track, s):
    """Raw track bounds (e_y lower, e_y upper); left is positive."""
    return -float(track._lerp(track.half_width_right, s)), float(track._lerp(track.half_width_left, s))


def make_synthetic_track(segments, half_width_left=2.0, half_width_right=2.0, closed=True):
    """Build a track from ``segments``.

    Each segment is ``{"straight": length}`` or
    ``{"arc": radius, "angle": degrees}`` (positive angle turns left).
    """
    pieces = []
    x, y, h = 0.0, 0.0, 0.0
    for seg in segments:
        if "straight" in seg:
            L, kappa = float(seg["straight"]), 0.0
        elif "arc" in seg:
            R = float(seg["arc"])
            ang = math.radians(float(seg["angle"]))
            L, kappa = R * abs(ang), math.copysign(1.0 / R, ang)
        else:
            raise InvalidArgument(f"unknown segment {seg!r}")
        if L <= 0:
            raise InvalidArgument("segments need positive length")
        pieces.append((x, y, h, L, kappa))
        x, y, h = _advance(x, y, h, L, kappa)
    total = sum(p[3] for p in pieces)
    if closed and (math.hypot(x, y) > 1e-3 or abs(wrap_angle(h)) > 1e-3):
        raise InvalidArgument("segments do not close")

    n = max(int(round(total / SAMPLE_STEP)), 2)
    s = np.linspace(0.0, total, n + 1)
    out = np.empty((n + 1, 4))
    starts = np.cumsum([0.0] + [p[3] for p in pieces])
    for k, sk in enumerate(s):
        j = min(int(np.searchsorted(starts, sk, side="right")) - 1, len(pieces) - 1)
        px, py, ph, _, kappa = pieces[j]
        out[k, :3] = _advance(px, py, ph, sk - starts[j], kappa)
        out[k, 3] = kappa
    if closed:
        # remove the closure residual so the last sample coincides with the first
        out[-1, :2] = out[0, :2]
    return Track(
        s,
        out[:, 0].copy(),
        out[:, 1].copy(),
        out[:, 2].copy(),
        out[:, 3].copy(),
        np.full(n + 1, float(half_width_left)),
        np.full(n + 1, float(half_width_right)),
        closed,
    )


def _advance(x, y, h, L, kappa):
    if kappa == 0.0:
        return x + L * math.cos(h), y + L * math.sin(h), h
    h1 = h + kappa * L
    return x + (math.sin(h1) - math.sin(h)) / kappa, y - (math.cos(h1) - math.cos(h)) / kappa, h1


# rounded rectangle with four different corner radii, ~180 m
DEFAULT_SEGMENTS = (
    {"straight": 30.0},
    {"arc": 14.0, "angle": 90.0},
    {"straight": 16.0},
    {"arc": 14.0, "angle": 90.0},
    {"straight": 30.0},
    {"arc": 14.0, "angle": 90.0},
    {"straight": 16.0},
    {"arc": 14.0, "angle": 90.0},
)


def default_track():
    return make_synthetic_track(DEFAULT_SEGMENTS, 2.0, 2.0)


def frenet_to_global(track, s, e_y, e_theta):
    cx, cy, h = track.pose_at(s)
    return cx - e_y * math.sin(h), cy + e_y * math.cos(h), h + e_theta


def global_to_frenet(track, X, Y, psi, s_hint=None, window=5.0):
    """Project a pose onto the centerline: returns (s, e_y, e_theta)."""
    if s_hint is None or not track.closed:
        idx = np.arange(track.s.size - 1)
    else:
        lo = int(np.searchsorted(track.s, (s_hint - window) % track.length))
        n_win = int(2 * window / (track.s[1] - track.s[0])) + 2
        idx = (lo + np.arange(n_win)) % (track.s.size - 1)
    d2 = (track.x[idx] - X) ** 2 + (track.y[idx] - Y) ** 2
    i = int(idx[int(np.argmin(d2))])
    if s_hint is not None and d2.min() > (max(track.half_width_left.max(), track.half_width_right.max()) + LOCALIZATION_MARGIN) ** 2:
        return global_to_frenet(track, X, Y, psi)

    def dist2(s):
        cx, cy, _ = track.pose_at(s)
        return (cx - X) ** 2 + (cy - Y) ** 2

    step = track.s[1] - track.s[0]
    a, b = track.s[i] - step, track.s[i] + step
    if not track.closed:
        a, b = max(a, 0.0), min(b, track.length)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = dist2(c), dist2(d)
    while b - a > 1e-7:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = dist2(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = dist2(d)
    s = 0.5 * (a + b)
    if track.closed:
        s %= track.length
    cx, cy, h = track.pose_at(s)
    e_y = -(X - cx) * math.sin(h) + (Y - cy) * math.cos(h)
    lb, ub = bounds_at(track, s)
    if e_y > ub + LOCALIZATION_MARGIN or e_y < lb - LOCALIZATION_MARGIN:
        raise LocalizationError(f"pose {e_y:.2f} m off the centerline at s={s:.1f}")
    return s, e_y, wrap_angle(psi - h)
