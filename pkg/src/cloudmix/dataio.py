"""File formats, OFF mesh import, synthetic shape generation, checkpoints.

Formats owned here:
 - text cloud:   header ``pcd <N> <has_labels:0|1> <category:int|-1>``,
                 then N rows ``x y z [part_label]`` at 9 significant digits
 - binary cloud: magic ``PCDB``, u32 version, u32 N, u32 flags
                 (bit0 part labels, bit1 category), optional i32 category,
                 N little-endian f32 coordinate triples, N u16 labels
 - checkpoint:   magic ``MDCK``, u32 version, length-prefixed JSON config,
                 u32 epoch, u64 Adam step count, then per parameter (sorted
                 by name) the name, shape, and f64 data + Adam moments

Everything is endianness-pinned little-endian so files travel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, normalize_unit_sphere


class DataFormatError(ValueError):
    """Base class for file parsing and compatibility failures."""


class MalformedHeaderError(DataFormatError):
    pass


class RowCountMismatchError(DataFormatError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass


class ShapeTableMismatchError(DataFormatError):
    pass


# ------------------------------------------------------------------- dataset


SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    clouds: list[PointCloud]
    split: list[str]
    category_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.clouds) < 1:
            raise ValueError("dataset needs at least one cloud")
        if len(self.split) != len(self.clouds):
            raise ValueError(f"{len(self.split)} split tags for {len(self.clouds)} clouds")
        for tag in self.split:
            if tag not in SPLITS:
                raise ValueError(f"unknown split tag {tag!r}")
        n_cat = len(self.category_names)
        for c in self.clouds:
            if c.category is not None and n_cat and not 0 <= c.category < n_cat:
                raise ValueError(f"category {c.category} outside table of {n_cat}")

    def __len__(self) -> int:
        return len(self.clouds)

    def indices(self, split: str) -> list[int]:
        return [i for i, tag in enumerate(self.split) if tag == split]

    def subset(self, indices) -> "Dataset":
        return Dataset(
            [self.clouds[i] for i in indices],
            [self.split[i] for i in indices],
            self.category_names,
        )


# ---------------------------------------------------------------- text cloud


def _format_row(p: np.ndarray, label: int | None) -> str:
    row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
    return row if label is None else f"{row} {label}"


def write_cloud_text(path, cloud: PointCloud) -> None:
    has_labels = cloud.part_labels is not None
    category = -1 if cloud.category is None else int(cloud.category)
    lines = [f"pcd {cloud.n_points} {int(has_labels)} {category}"]
    for i in range(cloud.n_points):
        lines.append(
            _format_row(cloud.points[i], int(cloud.part_labels[i]) if has_labels else None)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud_text(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise MalformedHeaderError("empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "pcd":
        raise MalformedHeaderError(f"bad header {lines[0]!r}")
    try:
        n, has_labels, category = int(head[1]), int(head[2]), int(head[3])
    except ValueError:
        raise MalformedHeaderError(f"non-integer header fields in {lines[0]!r}") from None
    if n < 1:
        raise MalformedHeaderError(f"point count must be >= 1, got {n}")
    if has_labels not in (0, 1):
        raise MalformedHeaderError(f"has_labels must be 0 or 1, got {has_labels}")
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise RowCountMismatchError(f"header says {n} rows, file has {len(rows)}")
    want = 4 if has_labels else 3
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64) if has_labels else None
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != want:
            raise DataFormatError(f"row {i}: expected {want} fields, got {len(parts)}")
        try:
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            if has_labels:
                labels[i] = int(parts[3])
        except ValueError:
            raise DataFormatError(f"row {i}: unparseable values {ln!r}") from None
    return PointCloud(pts, part_labels=labels, category=None if category == -1 else category)


# -------------------------------------------------------------- binary cloud

PCDB_MAGIC = b"PCDB"
PCDB_VERSION = 1
_FLAG_LABELS = 1
_FLAG_CATEGORY = 2


def write_cloud_binary(path, cloud: PointCloud) -> None:
    flags = 0
    if cloud.part_labels is not None:
        flags |= _FLAG_LABELS
    if cloud.category is not None:
        flags |= _FLAG_CATEGORY
    with open(path, "wb") as f:
        f.write(PCDB_MAGIC)
        f.write(struct.pack("<III", PCDB_VERSION, cloud.n_points, flags))
        if cloud.category is not None:
            f.write(struct.pack("<i", int(cloud.category)))
        f.write(cloud.points.astype("<f4").tobytes(order="C"))
        if cloud.part_labels is not None:
            f.write(cloud.part_labels.astype("<u2").tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedPayloadError(f"truncated payload: wanted {n} bytes of {what}, got {len(data)}")
    return data


def read_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PCDB_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {PCDB_MAGIC!r}")
        version, n, flags = struct.unpack("<III", _read_exact(f, 12, "header"))
        if version != PCDB_VERSION:
            raise VersionError(f"unsupported version {version}, expected {PCDB_VERSION}")
        if n < 1:
            raise MalformedHeaderError(f"point count must be >= 1, got {n}")
        if flags & ~(_FLAG_LABELS | _FLAG_CATEGORY):
            raise MalformedHeaderError(f"unknown flag bits in {flags:#x}")
        category = None
        if flags & _FLAG_CATEGORY:
            (category,) = struct.unpack("<i", _read_exact(f, 4, "category"))
        pts = np.frombuffer(_read_exact(f, n * 12, "coordinates"), dtype="<f4").reshape(n, 3)
        labels = None
        if flags & _FLAG_LABELS:
            labels = np.frombuffer(_read_exact(f, n * 2, "labels"), dtype="<u2").astype(np.int64)
        tail = f.read(1)
        if tail:
            raise DataFormatError("trailing bytes after payload")
    return PointCloud(pts.astype(np.float64), part_labels=labels, category=category)


def write_cloud(path, cloud: PointCloud, fmt: str = "text") -> None:
    if fmt == "text":
        write_cloud_text(path, cloud)
    elif fmt == "binary":
        write_cloud_binary(path, cloud)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a cloud; format sniffed from the magic bytes unless forced."""
    if fmt is None:
        with open(path, "rb") as f:
            fmt = "binary" if f.read(4) == PCDB_MAGIC else "text"
    if fmt == "text":
        return read_cloud_text(path)
    if fmt == "binary":
        return read_cloud_binary(path)
    raise ValueError(f"unknown format {fmt!r}")


# ----------------------------------------------------------------- OFF mesh


def import_off_mesh(path, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Sample n_points from the mesh surface, area-weighted, then normalize.

    Polygons beyond triangles are fan-triangulated. Handles the common
    header variant where the vertex counts share the first line with OFF.
    """
    tokens: list[str] = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise MalformedHeaderError("not an OFF file")
    rest = tokens[0][3:]
    tokens = ([rest] if rest else []) + tokens[1:]
    pos = 0

    def take(count: int, what: str) -> list[str]:
        nonlocal pos
        if pos + count > len(tokens):
            raise TruncatedPayloadError(f"truncated payload while reading {what}")
        out = tokens[pos : pos + count]
        pos += count
        return out

    try:
        nv, nf, _ = (int(t) for t in take(3, "counts"))
    except ValueError:
        raise MalformedHeaderError("bad vertex/face counts") from None
    if nv < 3 or nf < 1:
        raise MalformedHeaderError(f"need >= 3 vertices and >= 1 face, got {nv}/{nf}")
    verts = np.array([[float(x) for x in take(3, "vertex")] for _ in range(nv)])
    tris: list[tuple[int, int, int]] = []
    for _ in range(nf):
        m = int(take(1, "face size")[0])
        if m < 3:
            raise DataFormatError(f"face with {m} vertices")
        idx = [int(t) for t in take(m, "face")]
        if any(not 0 <= i < nv for i in idx):
            raise DataFormatError("face index out of range")
        for j in range(1, m - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    a = verts[[t[0] for t in tris]]
    b = verts[[t[1] for t in tris]]
    c = verts[[t[2] for t in tris]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = float(areas.sum())
    if total <= 0.0:
        raise DataFormatError("mesh has zero total surface area")
    choice = rng.choice(len(tris), size=n_points, p=areas / total)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    pts = a[choice] + u[:, None] * (b[choice] - a[choice]) + v[:, None] * (c[choice] - a[choice])
    return normalize_unit_sphere(PointCloud(pts))


# ------------------------------------------------------------ synthetic set


def _sample_boxes(boxes, n: int, rng: np.random.Generator):
    """Surface-sample a union of axis-aligned boxes.

    boxes: list of (center (3,), extents (3,), part_label). Returns points
    and labels; face choice is proportional to face area over all boxes.
    """
    faces = []  # (box_i, axis, sign, area)
    for bi, (_, ext, _) in enumerate(boxes):
        for axis in range(3):
            o1, o2 = [i for i in range(3) if i != axis]
            area = ext[o1] * ext[o2]
            faces.append((bi, axis, +1, area))
            faces.append((bi, axis, -1, area))
    areas = np.array([f[3] for f in faces])
    probs = areas / areas.sum()
    pick = rng.choice(len(faces), size=n, p=probs)
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i, fi in enumerate(pick):
        bi, axis, sign, _ = faces[fi]
        center, ext, label = boxes[bi]
        p = center + (rng.random(3) - 0.5) * ext
        p[axis] = center[axis] + sign * ext[axis] / 2.0
        pts[i] = p
        labels[i] = label
    return pts, labels


def _gen_sphere(n, p, rng):
    r = p.get("radius", 1.0)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * r
    labels = (pts[:, 2] < 0).astype(np.int64)  # upper/lower hemisphere
    return pts, labels


def _gen_box(n, p, rng):
    ext = np.array(p.get("extents", (1.0, 0.8, 0.6)), dtype=np.float64)
    pts, _ = _sample_boxes([(np.zeros(3), ext, 0)], n, rng)
    top = np.isclose(pts[:, 2], ext[2] / 2)
    bottom = np.isclose(pts[:, 2], -ext[2] / 2)
    labels = np.where(top, 0, np.where(bottom, 1, 2)).astype(np.int64)
    return pts, labels


def _gen_cylinder(n, p, rng):
    r = p.get("radius", 0.5)
    h = p.get("height", 1.2)
    side_area = 2 * np.pi * r * h
    cap_area = 2 * np.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    # side: uniform in height
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-h / 2, h / 2, size=int(on_side.sum()))
    # caps: uniform in disc, sqrt for area
    nc = int((~on_side).sum())
    rad = r * np.sqrt(rng.random(nc))
    cap_z = rng.choice([-h / 2, h / 2], size=nc)
    pts[~on_side, 0] = rad * np.cos(theta[~on_side])
    pts[~on_side, 1] = rad * np.sin(theta[~on_side])
    pts[~on_side, 2] = cap_z
    labels = np.where(on_side, 0, 1).astype(np.int64)
    return pts, labels


def _gen_cone(n, p, rng):
    r = p.get("radius", 0.6)
    h = p.get("height", 1.0)
    slant = np.sqrt(r * r + h * h)
    side_area = np.pi * r * slant
    base_area = np.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + base_area)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    ns = int(on_side.sum())
    # lateral surface: radius fraction sqrt(u) for uniform area, apex at +h
    t = np.sqrt(rng.random(ns))
    pts[on_side, 0] = r * t * np.cos(theta[on_side])
    pts[on_side, 1] = r * t * np.sin(theta[on_side])
    pts[on_side, 2] = h * (1.0 - t)
    nb = n - ns
    rad = r * np.sqrt(rng.random(nb))
    pts[~on_side, 0] = rad * np.cos(theta[~on_side])
    pts[~on_side, 1] = rad * np.sin(theta[~on_side])
    pts[~on_side, 2] = 0.0
    labels = np.where(on_side, 0, 1).astype(np.int64)
    return pts, labels


def _gen_torus(n, p, rng):
    big = p.get("major_radius", 0.8)
    small = p.get("minor_radius", 0.3)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    # rejection-sample the tube angle: surface density scales with big + small*cos(v)
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
        accept = rng.random(cand.size) <= (big + small * np.cos(cand)) / (big + small)
        take = cand[accept][: n - filled]
        v[filled : filled + take.size] = take
        filled += take.size
    ring = big + small * np.cos(v)
    pts = np.column_stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(v)])
    labels = (np.cos(v) < 0).astype(np.int64)  # outer vs inner half of the tube
    return pts, labels


def _gen_table(n, p, rng):
    width = p.get("width", 1.0)
    depth = p.get("depth", 0.6)
    height = p.get("height", 0.5)
    top_t = p.get("top_thickness", 0.08)
    leg_w = p.get("leg_width", 0.06)
    boxes = [
        (np.array([0.0, 0.0, height - top_t / 2]), np.array([width, depth, top_t]), 0)
    ]
    leg_h = height - top_t
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (width / 2 - leg_w / 2)
            cy = sy * (depth / 2 - leg_w / 2)
            boxes.append(
                (np.array([cx, cy, leg_h / 2]), np.array([leg_w, leg_w, leg_h]), 1)
            )
    return _sample_boxes(boxes, n, rng)


_GENERATORS = {
    "sphere": (_gen_sphere, {"radius"}),
    "box": (_gen_box, {"extents"}),
    "cylinder": (_gen_cylinder, {"radius", "height"}),
    "cone": (_gen_cone, {"radius", "height"}),
    "torus": (_gen_torus, {"major_radius", "minor_radius"}),
    "table": (_gen_table, {"width", "depth", "height", "top_thickness", "leg_width"}),
}

SYNTH_KINDS = tuple(_GENERATORS)


def synth_generate(
    kind: str,
    n_points: int,
    params: dict | None = None,
    rng: np.random.Generator | None = None,
    normalize: bool = True,
) -> PointCloud:
    """Sample an analytic surface with part labels.

    normalize=False returns the raw surface samples (e.g. a sphere at its
    stated radius) for inspection; the default matches training use.
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown kind {kind!r}; choose from {sorted(_GENERATORS)}")
    if n_points < 8:
        raise ValueError(f"n_points must be >= 8, got {n_points}")
    params = dict(params or {})
    gen, allowed = _GENERATORS[kind]
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown params for {kind}: {sorted(unknown)}")
    if rng is None:
        rng = np.random.default_rng()
    pts, labels = gen(n_points, params, rng)
    cloud = PointCloud(pts, part_labels=labels)
    return normalize_unit_sphere(cloud) if normalize else cloud


def parts_per_kind(kind: str) -> int:
    """Number of distinct part labels each generator emits."""
    return {"sphere": 2, "box": 3, "cylinder": 2, "cone": 2, "torus": 2, "table": 2}[kind]


def make_synthetic_dataset(
    n_train: int,
    n_test: int,
    n_points: int,
    seed: int,
    kinds: tuple[str, ...] = SYNTH_KINDS,
) -> Dataset:
    """Balanced multi-class set; per-cloud streams keyed by (seed, index).

    Shape parameters are jittered per cloud so classes have intra-class
    variety; the category id is the kind's position in `kinds`.
    """
    clouds: list[PointCloud] = []
    split: list[str] = []
    for i in range(n_train + n_test):
        rng = np.random.default_rng([seed, i])
        kind = kinds[i % len(kinds)]
        scale = {
            "sphere": {"radius": rng.uniform(0.8, 1.2)},
            "box": {"extents": (rng.uniform(0.8, 1.2), rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.8))},
            "cylinder": {"radius": rng.uniform(0.35, 0.65), "height": rng.uniform(0.9, 1.5)},
            "cone": {"radius": rng.uniform(0.45, 0.75), "height": rng.uniform(0.8, 1.2)},
            "torus": {"major_radius": rng.uniform(0.65, 0.95), "minor_radius": rng.uniform(0.2, 0.4)},
            "table": {"width": rng.uniform(0.8, 1.2), "depth": rng.uniform(0.5, 0.7), "height": rng.uniform(0.4, 0.6)},
        }[kind]
        cloud = synth_generate(kind, n_points, scale, rng)
        clouds.append(
            PointCloud(cloud.points, part_labels=cloud.part_labels, category=kinds.index(kind))
        )
        split.append("train" if i < n_train else "test")
    return Dataset(clouds, split, category_names=list(kinds))


# ---------------------------------------------------------------- checkpoint

MDCK_MAGIC = b"MDCK"
MDCK_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step_count: int
    epoch: int
    config: dict


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    config_bytes = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MDCK_MAGIC)
        f.write(struct.pack("<I", MDCK_VERSION))
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<IQ", ckpt.epoch, ckpt.adam_step_count))
        names = sorted(ckpt.params)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            p = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            m = np.ascontiguousarray(ckpt.adam_m.get(name, np.zeros_like(p)), dtype="<f8")
            v = np.ascontiguousarray(ckpt.adam_v.get(name, np.zeros_like(p)), dtype="<f8")
            if m.shape != p.shape or v.shape != p.shape:
                raise ShapeTableMismatchError(
                    f"moment shape {m.shape}/{v.shape} vs param shape {p.shape} for {name!r}"
                )
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(p.tobytes())
            f.write(m.tobytes())
            f.write(v.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MDCK_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MDCK_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != MDCK_VERSION:
            raise VersionError(f"unsupported version {version}, expected {MDCK_VERSION}")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            config = json.loads(_read_exact(f, clen, "config").decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise MalformedHeaderError("unparseable config snapshot") from None
        epoch, step_count = struct.unpack("<IQ", _read_exact(f, 12, "counters"))
        (n_params,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        params: dict[str, np.ndarray] = {}
        adam_m: dict[str, np.ndarray] = {}
        adam_v: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape")) if ndim else ()
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            nbytes = count * 8
            params[name] = np.frombuffer(_read_exact(f, nbytes, f"{name} data"), dtype="<f8").reshape(shape).copy()
            adam_m[name] = np.frombuffer(_read_exact(f, nbytes, f"{name} moment m"), dtype="<f8").reshape(shape).copy()
            adam_v[name] = np.frombuffer(_read_exact(f, nbytes, f"{name} moment v"), dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise DataFormatError("trailing bytes after payload")
    return Checkpoint(params, adam_m, adam_v, step_count, epoch, config)


def check_shape_table(expected: dict[str, np.ndarray], got: dict[str, np.ndarray], context: str = "") -> None:
    """Raise ShapeTableMismatchError unless both tables have identical
    names and shapes."""
    where = f" ({context})" if context else ""
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise ShapeTableMismatchError(
            f"shape-table mismatch{where}: missing {missing[:4]}, unexpected {extra[:4]}"
        )
    for name in sorted(expected):
        if expected[name].shape != got[name].shape:
            raise ShapeTableMismatchError(
                f"shape-table mismatch{where}: {name!r} is {got[name].shape}, expected {expected[name].shape}"
            )


def filter_params(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


# ----------------------------------------------------------------- PLY export


def write_ply(path, points: np.ndarray, grayscale: np.ndarray | None = None) -> None:
    """ASCII PLY; grayscale in [0, 1] becomes equal R/G/B channels."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    n = pts.shape[0]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    gray = None
    if grayscale is not None:
        gray = np.clip(np.asarray(grayscale, dtype=np.float64).reshape(-1), 0.0, 1.0)
        if gray.shape[0] != n:
            raise ValueError(f"{gray.shape[0]} grayscale values for {n} points")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i in range(n):
        row = f"{pts[i, 0]:.9g} {pts[i, 1]:.9g} {pts[i, 2]:.9g}"
        if gray is not None:
            g = int(round(float(gray[i]) * 255))
            row += f" {g} {g} {g}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------- dataset directory


def write_dataset_dir(path, dataset: Dataset, fmt: str = "binary") -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "categories.txt").write_text("\n".join(dataset.category_names) + "\n")
    ext = "pcdb" if fmt == "binary" else "pcd"
    for split in SPLITS:
        idx = dataset.indices(split)
        if not idx:
            continue
        sub = root / split
        sub.mkdir(exist_ok=True)
        digits = len(str(len(idx)))
        for j, i in enumerate(idx):
            write_cloud(sub / f"{j:0{digits}d}.{ext}", dataset.clouds[i], fmt)


def load_dataset_dir(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError(f"not a dataset directory: {root}")
    cat_file = root / "categories.txt"
    names = cat_file.read_text().split() if cat_file.exists() else []
    clouds: list[PointCloud] = []
    split: list[str] = []
    for tag in SPLITS:
        sub = root / tag
        if not sub.is_dir():
            continue
        for p in sorted(sub.iterdir()):
            if p.suffix in (".pcd", ".pcdb"):
                clouds.append(read_cloud(p))
                split.append(tag)
    if not clouds:
        raise DataFormatError(f"no clouds found under {root}")
    return Dataset(clouds, split, category_names=names)
