"""Synthetic problem instances for both tasks, plus a text scene format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Line2D,
    RelativePose,
    fundamental_from_pose,
    line_point_residual,
    rotation_about_axis,
    rotation_angle_deg,
    sampson_residual,
)

LINE_TASK = "line2d"
F_TASK = "fundamental"
TASKS = (LINE_TASK, F_TASK)
MINIMAL_SIZE = {LINE_TASK: 2, F_TASK: 8}

LINE_EPSILON = 0.1
LINE_EXTENT = 10.0
LINE_MIN_SEGMENT = 2.0

F_EPSILON = 4.0
FOCAL = 600.0
PRINCIPAL = (320.0, 240.0)
IMAGE_SIZE = (640.0, 480.0)
MAX_ROTATION_DEG = 45.0


class SceneGenerationError(RuntimeError):
    pass


class SceneParseError(ValueError):
    pass


class UnsupportedVersionError(SceneParseError):
    pass


@dataclass
class SceneData:
    """One robust-estimation instance.

    ``features`` feed the network (line: raw coordinates; fundamental:
    normalised coordinates plus a match score). ``points`` are what the
    geometry sees (line: ``(N, 2)``; fundamental: pixel ``(N, 4)``).
    """

    task: str
    features: np.ndarray
    points: np.ndarray
    true_inlier_mask: np.ndarray
    epsilon: float
    gt_line: Line2D | None = None
    gt_pose: RelativePose | None = None
    gt_f: np.ndarray | None = None
    intrinsics: np.ndarray | None = None
    outlier_rate: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def c(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return MINIMAL_SIZE[self.task]

    def residuals(self, hypothesis) -> np.ndarray:
        if self.task == LINE_TASK:
            return line_point_residual(hypothesis, self.points)
        return sampson_residual(hypothesis, self.points[:, :2], self.points[:, 2:])


def derive_seed(base: int, index: int) -> int:
    """Independent per-item seed for item ``index`` of a seeded collection."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# -- line task ----------------------------------------------------------------------

def _segment_in_square(p: np.ndarray, d: np.ndarray, extent: float) -> tuple[float, float]:
    lo, hi = -np.inf, np.inf
    for ax in range(2):
        if abs(d[ax]) > 1e-12:
            a, b = (0.0 - p[ax]) / d[ax], (extent - p[ax]) / d[ax]
            lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    return lo, hi


def gen_line_scene(outlier_rate: float, n_points: int = 100, rng_seed: int = 0,
                   inlier_noise: float = 0.1, epsilon: float = LINE_EPSILON) -> SceneData:
    """Noisy points on a random line plus uniform clutter in the 10x10 square.

    Inlier offsets are uniform in ``[-inlier_noise, inlier_noise]`` along the
    normal. Rows are shuffled so index order carries no label information.
    """
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError(f"outlier rate {outlier_rate} outside [0, 1)")
    n_in = int(round((1.0 - outlier_rate) * n_points))
    if n_in < 2:
        raise ValueError(f"only {n_in} inliers for N={n_points}, rate={outlier_rate}")
    rng = np.random.default_rng(rng_seed)
    while True:
        p = rng.uniform(0.0, LINE_EXTENT, 2)
        theta = rng.uniform(0.0, np.pi)
        d = np.array([np.cos(theta), np.sin(theta)])
        lo, hi = _segment_in_square(p, d, LINE_EXTENT)
        if hi - lo >= LINE_MIN_SEGMENT:
            break
    normal = np.array([-d[1], d[0]])
    gt = Line2D.from_normal(normal[0], normal[1], -(normal @ p))
    t = rng.uniform(lo, hi, n_in)
    offset = rng.uniform(-inlier_noise, inlier_noise, n_in)
    # projection onto the square is non-expansive, so clipping keeps residuals <= noise
    inliers = np.clip(p + t[:, None] * d + offset[:, None] * normal, 0.0, LINE_EXTENT)
    outliers = rng.uniform(0.0, LINE_EXTENT, (n_points - n_in, 2))
    pts = np.vstack([inliers, outliers])
    mask = np.zeros(n_points, dtype=bool)
    mask[:n_in] = True
    perm = rng.permutation(n_points)
    pts, mask = pts[perm], mask[perm]
    return SceneData(LINE_TASK, pts.copy(), pts, mask, epsilon, gt_line=gt,
                     outlier_rate=outlier_rate, seed=int(rng_seed))


# -- fundamental task ---------------------------------------------------------------

def intrinsics() -> np.ndarray:
    return np.array([[FOCAL, 0.0, PRINCIPAL[0]], [0.0, FOCAL, PRINCIPAL[1]], [0.0, 0.0, 1.0]])


def _look_rotation(forward: np.ndarray, roll: float) -> np.ndarray:
    """World-to-camera rotation whose optical axis is ``forward``."""
    z = forward / np.linalg.norm(forward)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.vstack([x, y, z])
    return rotation_about_axis([0.0, 0.0, 1.0], roll) @ r


def _project(k: np.ndarray, x_cam: np.ndarray) -> np.ndarray:
    h = x_cam @ k.T
    return h[:, :2] / h[:, 2:3]


def _visible(px: np.ndarray, depth: np.ndarray) -> np.ndarray:
    w, h = IMAGE_SIZE
    return (depth > 0.1) & (px[:, 0] >= 0) & (px[:, 0] <= w) & (px[:, 1] >= 0) & (px[:, 1] <= h)


def normalize_pixels(px: np.ndarray) -> np.ndarray:
    cx, cy = IMAGE_SIZE[0] / 2.0, IMAGE_SIZE[1] / 2.0
    return np.column_stack([(px[:, 0] - cx) / cx, (px[:, 1] - cy) / cy])


def gen_epipolar_scene(n_points: int = 150, outlier_rate: float = 0.4, pixel_noise_sigma: float = 0.5,
                       rng_seed: int = 0, epsilon: float = F_EPSILON) -> SceneData:
    """Two-view correspondences from a random relative pose with uniform outliers."""
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError(f"outlier rate {outlier_rate} outside [0, 1)")
    n_in = int(round((1.0 - outlier_rate) * n_points))
    if n_in < 8:
        raise ValueError(f"only {n_in} inliers for N={n_points}, rate={outlier_rate}")
    rng = np.random.default_rng(rng_seed)
    k = intrinsics()
    w, h = IMAGE_SIZE
    for _ in range(100):
        depth = rng.uniform(4.0, 8.0)
        center = np.array([0.0, 0.0, depth])
        c2 = rng.normal(size=3)
        c2 /= np.linalg.norm(c2)
        target = center + rng.normal(scale=0.15 * depth, size=3)
        roll = np.radians(rng.uniform(-30.0, 30.0))
        rot = _look_rotation(target - c2, roll)
        if rotation_angle_deg(rot) > MAX_ROTATION_DEG:
            continue
        t = -rot @ c2
        half_w = depth * (w / 2.0) / FOCAL
        half_h = depth * (h / 2.0) / FOCAL
        kept = []
        for _ in range(20):
            pts3 = np.column_stack([rng.uniform(-half_w, half_w, 4 * n_in),
                                    rng.uniform(-half_h, half_h, 4 * n_in),
                                    rng.uniform(depth - 2.0, depth + 2.0, 4 * n_in)])
            x2 = pts3 @ rot.T + t
            ok = _visible(_project(k, pts3), pts3[:, 2]) & _visible(_project(k, x2), x2[:, 2])
            kept.extend(pts3[ok])
            if len(kept) >= n_in:
                break
        if len(kept) < n_in:
            continue
        pts3 = np.array(kept[:n_in])
        break
    else:
        raise SceneGenerationError("no usable relative pose after 100 attempts")

    pose = RelativePose(rot, t / np.linalg.norm(t))
    f_true = fundamental_from_pose(rot, t, k, k)
    clean1 = _project(k, pts3)
    clean2 = _project(k, pts3 @ rot.T + t)
    p1 = clean1 + rng.normal(scale=pixel_noise_sigma, size=clean1.shape)
    p2 = clean2 + rng.normal(scale=pixel_noise_sigma, size=clean2.shape)
    for _ in range(100):
        bad = sampson_residual(f_true, p1, p2) > epsilon
        if not bad.any():
            break
        p1[bad] = clean1[bad] + rng.normal(scale=pixel_noise_sigma, size=(bad.sum(), 2))
        p2[bad] = clean2[bad] + rng.normal(scale=pixel_noise_sigma, size=(bad.sum(), 2))
    else:
        raise SceneGenerationError("inlier noise keeps exceeding the threshold")
    n_out = n_points - n_in
    o1 = rng.uniform([0.0, 0.0], [w, h], (n_out, 2))
    o2 = rng.uniform([0.0, 0.0], [w, h], (n_out, 2))
    pix = np.vstack([np.column_stack([p1, p2]), np.column_stack([o1, o2])])
    score = np.concatenate([np.exp(-sampson_residual(f_true, p1, p2) / epsilon),
                            rng.uniform(0.0, 1.0, n_out)])
    mask = np.zeros(n_points, dtype=bool)
    mask[:n_in] = True
    perm = rng.permutation(n_points)
    pix, score, mask = pix[perm], score[perm], mask[perm]
    feats = np.column_stack([normalize_pixels(pix[:, :2]), normalize_pixels(pix[:, 2:]), score])
    return SceneData(F_TASK, feats, pix, mask, epsilon, gt_pose=pose, gt_f=f_true,
                     intrinsics=k, outlier_rate=outlier_rate, seed=int(rng_seed),
                     meta={"pixel_noise_sigma": pixel_noise_sigma})


def make_scene(task: str, outlier_rate: float, n_points: int, rng_seed: int, *,
               inlier_noise: float = 0.1, pixel_noise_sigma: float = 0.5) -> SceneData:
    if task == LINE_TASK:
        return gen_line_scene(outlier_rate, n_points, rng_seed, inlier_noise=inlier_noise)
    if task == F_TASK:
        return gen_epipolar_scene(n_points, outlier_rate, pixel_noise_sigma, rng_seed)
    raise ValueError(f"unknown task {task!r}")


# -- file format --------------------------------------------------------------------

_VERSION = "v1"


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.asarray(values, dtype=np.float64).reshape(-1))


def format_scene(scene: SceneData) -> str:
    lines = [f"SCENE {_VERSION} {scene.task}",
             f"n {scene.n}",
             f"c {scene.c}",
             f"epsilon {scene.epsilon:.17g}",
             f"outlier_rate {scene.outlier_rate:.17g}",
             f"seed {scene.seed}"]
    if scene.task == LINE_TASK:
        lines.append("gt_line " + _fmt([scene.gt_line.a, scene.gt_line.b, scene.gt_line.c]))
    else:
        lines.append("gt_rotation " + _fmt(scene.gt_pose.rotation))
        lines.append("gt_translation " + _fmt(scene.gt_pose.translation_dir))
        lines.append("gt_f " + _fmt(scene.gt_f))
        lines.append("intrinsics " + _fmt(scene.intrinsics))
        lines.append(f"pixel_noise_sigma {scene.meta.get('pixel_noise_sigma', 0.0):.17g}")
    lines.append("rows")
    geo = scene.points if scene.task == F_TASK else np.empty((scene.n, 0))
    for feat, pt, inl in zip(scene.features, geo, scene.true_inlier_mask):
        lines.append(" ".join(filter(None, [_fmt(feat), _fmt(pt), "1" if inl else "0"])))
    return "\n".join(lines) + "\n"


def save_scene(scene: SceneData, path) -> None:
    Path(path).write_text(format_scene(scene))


def parse_scene(text: str) -> SceneData:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(i, msg):
        raise SceneParseError(f"line {i + 1}: {msg}")

    if not lines:
        fail(0, "empty file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "SCENE":
        fail(0, "expected 'SCENE <version> <task>'")
    if head[1] != _VERSION:
        raise UnsupportedVersionError(f"line 1: unsupported scene version {head[1]!r}")
    task = head[2]
    if task not in TASKS:
        fail(0, f"unknown task {task!r}")

    fields: dict[str, list[str]] = {}
    i = 1
    while i < len(lines) and lines[i] != "rows":
        parts = lines[i].split()
        if not parts:
            fail(i, "blank header line")
        fields[parts[0]] = parts[1:]
        i += 1
    if i == len(lines):
        fail(i - 1, "missing 'rows' marker")

    def get(key, count=None, cast=float):
        if key not in fields:
            fail(i, f"missing header field {key!r}")
        vals = fields[key]
        if count is not None and len(vals) != count:
            fail(i, f"field {key!r} expects {count} values")
        try:
            return [cast(v) for v in vals]
        except ValueError:
            fail(i, f"field {key!r} is malformed")

    n = get("n", 1, int)[0]
    c = get("c", 1, int)[0]
    eps = get("epsilon", 1)[0]
    rate = get("outlier_rate", 1)[0]
    seed = get("seed", 1, int)[0]
    width = c + (4 if task == F_TASK else 0) + 1
    rows = lines[i + 1:]
    if len(rows) != n:
        fail(len(lines) - 1 if len(rows) < n else i + 1 + n, f"expected {n} rows, found {len(rows)}")
    data = np.empty((n, width))
    for r, line in enumerate(rows):
        parts = line.split()
        if len(parts) != width:
            fail(i + 1 + r, f"expected {width} values, found {len(parts)}")
        try:
            data[r] = [float(v) for v in parts]
        except ValueError:
            fail(i + 1 + r, "non-numeric value")
    feats = data[:, :c].copy()
    mask = data[:, -1] == 1.0
    if task == LINE_TASK:
        a, b, cc = get("gt_line", 3)
        return SceneData(task, feats, feats.copy(), mask, eps, gt_line=Line2D(a, b, cc),
                         outlier_rate=rate, seed=seed)
    rot = np.array(get("gt_rotation", 9)).reshape(3, 3)
    t = np.array(get("gt_translation", 3))
    pose = RelativePose(rot, t)
    return SceneData(task, feats, data[:, c:c + 4].copy(), mask, eps, gt_pose=pose,
                     gt_f=np.array(get("gt_f", 9)).reshape(3, 3),
                     intrinsics=np.array(get("intrinsics", 9)).reshape(3, 3),
                     outlier_rate=rate, seed=seed,
                     meta={"pixel_noise_sigma": get("pixel_noise_sigma", 1)[0]})


def load_scene(path) -> SceneData:
    return parse_scene(Path(path).read_text())
