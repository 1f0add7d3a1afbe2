"""Feature-pack container format plus the synthetic-episode generator.

A feature pack binds everything one few-shot task needs: class names,
per-class text features and the zero-shot temperature, per-class support
feature maps, and query feature maps with global image features, labels
and a train/test split tag.

On disk a pack is a single FPK1 file:

    bytes 0..3    ASCII magic "FPK1"
    bytes 4..7    version, u32 little-endian, currently 1
    bytes 8..15   manifest byte length L, u64 little-endian
    bytes 16..16+L UTF-8 JSON manifest
    remainder     concatenated raw blobs at absolute offsets

The manifest carries {class_names, prompt_template, tau, dims:
{H, W, C, C_t}, normalize_locations, blobs: [...]}; each blob entry has
{name, kind, class_id (support only), shape, offset, byte_len}.  Float
blobs are 32-bit little-endian IEEE-754; labels and splits are u32
little-endian.  Blobs must be contiguous and non-overlapping.

Tensors are held in memory as float64 but always pass through a float32
quantization step when a pack is built, so write -> read round trips
are bitwise lossless.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BadMagic,
    EmptyClass,
    ManifestMismatch,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)
from .projection import FeatureMap
from .tensorcore import as_matrix

MAGIC = b"FPK1"
VERSION = 1

_SPLIT_CODES = {"train": 0, "test": 1}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}
_UNIT_ROW_TOL = 1e-4
DEFAULT_TAU = 0.01


def _quantize(a: np.ndarray) -> np.ndarray:
    """Round-trip through float32 so the array is exactly representable."""
    return np.asarray(a, dtype=np.float64).astype("<f4").astype(np.float64)


@dataclass(frozen=True)
class QueryRecord:
    """One query image: spatial map, global feature, label and split tag."""

    feature_map: FeatureMap
    global_feature: np.ndarray
    label: int
    split: str

    def __post_init__(self):
        if self.split not in _SPLIT_CODES:
            raise ShapeMismatch(f"QueryRecord: split must be train|test, got {self.split}")
        g = np.ascontiguousarray(self.global_feature, dtype=np.float64)
        if g.ndim != 1:
            raise ShapeMismatch("QueryRecord: global feature must be a vector")
        object.__setattr__(self, "global_feature", g)


@dataclass
class FeaturePack:
    """In-memory feature pack; see the module docstring for the file form."""

    class_names: list
    prompt_template: str
    tau: float
    text_features: np.ndarray
    support: list  # per class: list[FeatureMap]
    queries: list  # list[QueryRecord]
    normalize_locations: bool = True

    def __post_init__(self):
        self.text_features = as_matrix(self.text_features, "text_features")
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dims(self):
        """(H, W, C, C_t) shared by every map and feature in the pack."""
        m = self.support[0][0]
        return m.height, m.width, m.channels, self.text_features.shape[1]

    @property
    def shots(self) -> int:
        counts = {len(s) for s in self.support}
        return min(counts)

    def queries_for_split(self, split: str):
        return [q for q in self.queries if q.split == split]

    def validate(self):
        if len(self.class_names) < 2:
            raise ShapeMismatch("FeaturePack: need at least 2 classes")
        if len(self.support) != len(self.class_names):
            raise ShapeMismatch("FeaturePack: one support list per class")
        if self.text_features.shape[0] != len(self.class_names):
            raise ShapeMismatch("FeaturePack: one text feature row per class")
        for ci, maps in enumerate(self.support):
            if not maps:
                raise EmptyClass(f"FeaturePack: class {ci} has no support maps")
        h, w, c, c_t = self.dims
        for maps in self.support:
            for m in maps:
                if (m.height, m.width, m.channels) != (h, w, c):
                    raise ShapeMismatch("FeaturePack: support maps disagree on dims")
        for q in self.queries:
            m = q.feature_map
            if (m.height, m.width, m.channels) != (h, w, c):
                raise ShapeMismatch("FeaturePack: query maps disagree on dims")
            if q.global_feature.shape[0] != c_t:
                raise ShapeMismatch("FeaturePack: query global features disagree on C_t")
            if not 0 <= q.label < len(self.class_names):
                raise ShapeMismatch(f"FeaturePack: label {q.label} out of range")
        if self.normalize_locations:
            for maps in self.support:
                for m in maps:
                    _check_unit_rows(m.values, "support map")
            for q in self.queries:
                _check_unit_rows(q.feature_map.values, "query map")


def _check_unit_rows(values: np.ndarray, what: str):
    norms = np.linalg.norm(values, axis=1)
    if np.any(norms < 1e-12):
        raise ManifestMismatch(f"{what}: zero feature row in a normalized pack")
    if np.any(np.abs(norms - 1.0) > _UNIT_ROW_TOL):
        raise ManifestMismatch(f"{what}: rows not unit norm in a normalized pack")


# --------------------------------------------------------------------------
# serialization


def _blob_entries(pack: FeaturePack):
    """Yield (name, kind, class_id, array, dtype_code) in file order."""
    h, w, c, c_t = pack.dims
    yield ("text_features", "text", None,
           pack.text_features.astype("<f4"), "f4")
    for ci, maps in enumerate(pack.support):
        stacked = np.stack([m.values for m in maps]).astype("<f4")
        yield (f"support_{ci:04d}", "support", ci, stacked, "f4")
    nq = len(pack.queries)
    qmaps = (
        np.stack([q.feature_map.values for q in pack.queries])
        if nq else np.zeros((0, h * w, c))
    ).astype("<f4")
    qglob = (
        np.stack([q.global_feature for q in pack.queries])
        if nq else np.zeros((0, c_t))
    ).astype("<f4")
    labels = np.array([q.label for q in pack.queries], dtype="<u4")
    splits = np.array([_SPLIT_CODES[q.split] for q in pack.queries], dtype="<u4")
    yield ("query_maps", "query_map", None, qmaps, "f4")
    yield ("query_globals", "query_global", None, qglob, "f4")
    yield ("labels", "labels", None, labels, "u4")
    yield ("splits", "splits", None, splits, "u4")


def _render_manifest(pack: FeaturePack, blob_meta) -> bytes:
    h, w, c, c_t = pack.dims
    manifest = {
        "class_names": list(pack.class_names),
        "prompt_template": pack.prompt_template,
        "tau": pack.tau,
        "dims": {"H": h, "W": w, "C": c, "C_t": c_t},
        "normalize_locations": pack.normalize_locations,
        "blobs": blob_meta,
    }
    return json.dumps(manifest, separators=(",", ":")).encode("utf-8")


def pack_to_bytes(pack: FeaturePack) -> bytes:
    """Serialize a pack to FPK1 bytes."""
    entries = list(_blob_entries(pack))
    payloads = [arr.tobytes(order="C") for _, _, _, arr, _ in entries]

    def meta_for(offsets):
        meta = []
        for (name, kind, cid, arr, _), payload, off in zip(entries, payloads, offsets):
            entry = {"name": name, "kind": kind}
            if cid is not None:
                entry["class_id"] = cid
            entry["shape"] = list(arr.shape)
            entry["offset"] = off
            entry["byte_len"] = len(payload)
            meta.append(entry)
        return meta

    # Offsets depend on the manifest length, which depends on the offset
    # digits; iterate to a fixed point (converges in a couple of rounds).
    offsets = [0] * len(entries)
    for _ in range(8):
        manifest = _render_manifest(pack, meta_for(offsets))
        base = 16 + len(manifest)
        new_offsets = []
        pos = base
        for payload in payloads:
            new_offsets.append(pos)
            pos += len(payload)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    manifest = _render_manifest(pack, meta_for(offsets))

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<Q", len(manifest)))
    out.write(manifest)
    for payload in payloads:
        out.write(payload)
    return out.getvalue()


def write_pack(pack: FeaturePack, path) -> None:
    """Write a pack to ``path`` in the FPK1 byte layout."""
    with open(path, "wb") as fh:
        fh.write(pack_to_bytes(pack))


def pack_hash(pack: FeaturePack) -> str:
    """Content hash (sha256 of the serialized bytes)."""
    return hashlib.sha256(pack_to_bytes(pack)).hexdigest()


def _read_blob(data: bytes, entry: dict, dtype: str) -> np.ndarray:
    offset, byte_len = entry["offset"], entry["byte_len"]
    if offset + byte_len > len(data):
        raise TruncatedFile(
            f"blob {entry['name']!r} runs past end of file "
            f"({offset}+{byte_len} > {len(data)})"
        )
    shape = tuple(entry["shape"])
    itemsize = 4
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    if expected != byte_len:
        raise ManifestMismatch(
            f"blob {entry['name']!r}: shape {shape} implies {expected} bytes, "
            f"manifest says {byte_len}"
        )
    arr = np.frombuffer(data[offset:offset + byte_len], dtype=dtype).reshape(shape)
    return arr


def pack_from_bytes(data: bytes) -> FeaturePack:
    """Parse FPK1 bytes into a FeaturePack."""
    if len(data) < 16:
        raise TruncatedFile(f"file has only {len(data)} bytes")
    if data[0:4] != MAGIC:
        raise BadMagic(f"bad magic {data[0:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}, this reader supports {VERSION}")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if 16 + mlen > len(data):
        raise TruncatedFile("manifest runs past end of file")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestMismatch(f"manifest is not valid JSON: {exc}") from exc

    for key in ("class_names", "prompt_template", "tau", "dims",
                "normalize_locations", "blobs"):
        if key not in manifest:
            raise ManifestMismatch(f"manifest missing field {key!r}")
    dims = manifest["dims"]
    for key in ("H", "W", "C", "C_t"):
        if key not in dims:
            raise ManifestMismatch(f"manifest dims missing {key!r}")
    h, w, c, c_t = dims["H"], dims["W"], dims["C"], dims["C_t"]
    class_names = list(manifest["class_names"])
    d = len(class_names)

    known_kinds = {"text", "support", "query_map", "query_global", "labels", "splits"}
    by_kind: dict[str, list] = {}
    spans = []
    for entry in manifest["blobs"]:
        for key in ("name", "kind", "shape", "offset", "byte_len"):
            if key not in entry:
                raise ManifestMismatch(f"blob entry missing field {key!r}")
        if entry["kind"] not in known_kinds:
            raise ManifestMismatch(f"unknown blob kind {entry['kind']!r}")
        by_kind.setdefault(entry["kind"], []).append(entry)
        spans.append((entry["offset"], entry["offset"] + entry["byte_len"]))
    spans.sort()
    # Blobs must tile the region after the manifest with no gaps or overlap.
    if spans:
        if spans[0][0] != 16 + mlen:
            raise ManifestMismatch("first blob does not start after the manifest")
        for (_, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 != a1:
                raise ManifestMismatch("blobs are not contiguous")
        if spans[-1][1] > len(data):
            raise TruncatedFile("file ends before the last blob")
        if spans[-1][1] < len(data):
            raise ManifestMismatch("trailing bytes after the last blob")

    supports = sorted(by_kind.get("support", []), key=lambda e: e.get("class_id", -1))
    if len(supports) != d:
        raise ManifestMismatch(
            f"manifest declares {d} classes but {len(supports)} support blobs"
        )
    for single in ("text", "query_map", "query_global", "labels", "splits"):
        if len(by_kind.get(single, [])) != 1:
            raise ManifestMismatch(f"expected exactly one {single!r} blob")

    text = _read_blob(data, by_kind["text"][0], "<f4").astype(np.float64)
    if text.shape != (d, c_t):
        raise ManifestMismatch(f"text blob shape {text.shape} != ({d}, {c_t})")

    support = []
    for ci, entry in enumerate(supports):
        if entry.get("class_id") != ci:
            raise ManifestMismatch("support blobs do not cover classes 0..D-1")
        arr = _read_blob(data, entry, "<f4").astype(np.float64)
        if arr.ndim != 3 or arr.shape[1:] != (h * w, c):
            raise ManifestMismatch(
                f"support blob {ci} shape {arr.shape} != (N, {h * w}, {c})"
            )
        if arr.shape[0] < 1:
            raise EmptyClass(f"class {ci} has no support maps")
        support.append([FeatureMap(h, w, c, arr[k]) for k in range(arr.shape[0])])

    qmaps = _read_blob(data, by_kind["query_map"][0], "<f4").astype(np.float64)
    qglob = _read_blob(data, by_kind["query_global"][0], "<f4").astype(np.float64)
    labels = _read_blob(data, by_kind["labels"][0], "<u4")
    splits = _read_blob(data, by_kind["splits"][0], "<u4")
    nq = qmaps.shape[0]
    if qmaps.ndim != 3 or qmaps.shape[1:] != (h * w, c):
        raise ManifestMismatch("query_map blob has wrong shape")
    if qglob.shape != (nq, c_t) or labels.shape != (nq,) or splits.shape != (nq,):
        raise ManifestMismatch("query blobs disagree on query count")
    queries = []
    for k in range(nq):
        code = int(splits[k])
        if code not in _SPLIT_NAMES:
            raise ManifestMismatch(f"unknown split code {code}")
        label = int(labels[k])
        if not 0 <= label < d:
            raise ManifestMismatch(f"label {label} out of range for {d} classes")
        queries.append(
            QueryRecord(FeatureMap(h, w, c, qmaps[k]), qglob[k], label,
                        _SPLIT_NAMES[code])
        )

    return FeaturePack(
        class_names=class_names,
        prompt_template=manifest["prompt_template"],
        tau=float(manifest["tau"]),
        text_features=text,
        support=support,
        queries=queries,
        normalize_locations=bool(manifest["normalize_locations"]),
    )


def read_pack(path) -> FeaturePack:
    """Read an FPK1 file from ``path``."""
    with open(path, "rb") as fh:
        return pack_from_bytes(fh.read())


# --------------------------------------------------------------------------
# synthetic episodes


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a deterministic synthetic few-shot episode."""

    d: int = 5
    n: int = 4
    h: int = 2
    w: int = 2
    c: int = 16
    c_t: int = 16
    class_separation: float = 1.0
    noise_sigma: float = 0.1
    queries_per_class: int = 10
    seed: int = 0
    normalize_locations: bool = True
    zero_shot_cluster: float = 0.25

    def __post_init__(self):
        for name in ("d", "n", "h", "w", "c", "c_t", "queries_per_class"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"SynthSpec: {name} must be >= 1")
        if self.d < 2:
            raise ShapeMismatch("SynthSpec: need at least 2 classes")
        if self.noise_sigma < 0.0:
            raise ShapeMismatch("SynthSpec: noise_sigma must be >= 0")
        if self.zero_shot_cluster <= 0.0:
            raise ShapeMismatch("SynthSpec: zero_shot_cluster must be > 0")


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(norms, 1e-30)


def gen_synthetic(spec: SynthSpec) -> FeaturePack:
    """Deterministic synthetic feature pack.

    Per class, map-space location vectors are drawn around a unit-norm
    class center scaled by ``class_separation`` with Gaussian noise;
    global features live in a separate C_t space with their own class
    centers, and text features are unit vectors with cosine ~0.5 to the
    class's global center, so the zero-shot signal is informative but
    weak.  Supports are re-listed as train-split queries, matching the
    convention that training uses the shot set itself.  Identical seeds
    give bitwise-identical packs.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _unit_rows(rng.standard_normal((spec.d, spec.c)))

    # Global-space class centers are clustered around a shared base so
    # that cross-class text similarities sit close to the self
    # similarity of 0.5; at the exported temperature this keeps the
    # zero-shot logit spread moderate (informative but soft), the way a
    # pretrained contrastive model behaves, and fusion is exercised
    # nontrivially.
    g_base = _unit_rows(rng.standard_normal((1, spec.c_t)))[0]
    g_centers = _unit_rows(
        g_base + spec.zero_shot_cluster * rng.standard_normal((spec.d, spec.c_t))
    )

    # Text features: unit vectors at cosine ~0.5 to the global centers,
    # with the remaining mass kept clear of the whole center cluster so
    # it adds little cross-class noise.
    anchors = np.concatenate([g_base[None, :], g_centers], axis=0)
    basis, _ = np.linalg.qr(anchors.T)  # orthonormal span of the cluster
    text = np.empty((spec.d, spec.c_t))
    for ci in range(spec.d):
        ortho = rng.standard_normal(spec.c_t)
        ortho = ortho - basis @ (basis.T @ ortho)
        ortho = ortho - np.dot(ortho, g_centers[ci]) * g_centers[ci]
        ortho_norm = np.linalg.norm(ortho)
        if ortho_norm < 1e-12:
            ortho = np.roll(g_centers[ci], 1)
            ortho -= np.dot(ortho, g_centers[ci]) * g_centers[ci]
            ortho_norm = np.linalg.norm(ortho)
        text[ci] = 0.5 * g_centers[ci] + np.sqrt(0.75) * (ortho / ortho_norm)
    text = _quantize(_unit_rows(text))

    hw = spec.h * spec.w

    def draw_map(ci):
        rows = spec.class_separation * centers[ci] + spec.noise_sigma * rng.standard_normal((hw, spec.c))
        if spec.normalize_locations:
            rows = _unit_rows(rows)
        return FeatureMap(spec.h, spec.w, spec.c, _quantize(rows))

    # Global-feature noise is scaled so the noise VECTOR norm is about
    # noise_sigma regardless of C_t; per-coordinate noise would drown
    # the unit-norm centers in high dimension.
    g_sigma = spec.noise_sigma / np.sqrt(spec.c_t)

    def draw_global(ci):
        g = g_centers[ci] + g_sigma * rng.standard_normal(spec.c_t)
        return _quantize(_unit_rows(g))

    support = []
    globals_per_support = []
    for ci in range(spec.d):
        maps = [draw_map(ci) for _ in range(spec.n)]
        support.append(maps)
        globals_per_support.append([draw_global(ci) for _ in range(spec.n)])

    queries = []
    for ci in range(spec.d):
        for si, m in enumerate(support[ci]):
            queries.append(QueryRecord(m, globals_per_support[ci][si], ci, "train"))
    for ci in range(spec.d):
        for _ in range(spec.queries_per_class):
            queries.append(QueryRecord(draw_map(ci), draw_global(ci), ci, "test"))

    return FeaturePack(
        class_names=[f"class_{ci:03d}" for ci in range(spec.d)],
        prompt_template="a photo of a {}",
        tau=DEFAULT_TAU,
        text_features=text,
        support=support,
        queries=queries,
        normalize_locations=spec.normalize_locations,
    )


# --------------------------------------------------------------------------
# domain shift


@dataclass(frozen=True)
class ShiftSpec:
    """Distribution shift applied to query features only."""

    rotation_strength: float = 0.0
    noise_add: float = 0.0
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "rotation_strength": self.rotation_strength,
            "noise_add": self.noise_add,
            "seed": self.seed,
        }


def _mixing_matrix(dim: int, strength: float, rng) -> np.ndarray:
    """Orthogonal matrix exp(strength * A) with A random skew-symmetric."""
    if strength == 0.0:
        return np.eye(dim)
    raw = rng.standard_normal((dim, dim))
    skew = (raw - raw.T) * 0.5
    skew /= max(np.abs(skew).max(), 1e-30)
    import scipy.linalg

    return scipy.linalg.expm(strength * skew)


def domain_shift(pack: FeaturePack, shift) -> FeaturePack:
    """Rotate and perturb all query features, leaving supports and text alone.

    ``shift`` is a ShiftSpec or a dict with its fields.  The rotation is
    the identity at strength 0; additive noise is Gaussian per
    coordinate.  Map rows are re-normalized afterwards when the pack
    declares location normalization.  Deterministic for a fixed seed.
    """
    if isinstance(shift, dict):
        shift = ShiftSpec(**shift)
    if shift.rotation_strength == 0.0 and shift.noise_add == 0.0:
        return replace(pack, queries=list(pack.queries))
    rng = np.random.default_rng(shift.seed)
    h, w, c, c_t = pack.dims
    rot_map = _mixing_matrix(c, shift.rotation_strength, rng)
    rot_glob = _mixing_matrix(c_t, shift.rotation_strength, rng)

    new_queries = []
    for q in pack.queries:
        rows = q.feature_map.values @ rot_map.T
        if shift.noise_add > 0.0:
            rows = rows + shift.noise_add * rng.standard_normal(rows.shape)
            if pack.normalize_locations:
                rows = _unit_rows(rows)
        g = rot_glob @ q.global_feature
        if shift.noise_add > 0.0:
            g = g + shift.noise_add * rng.standard_normal(g.shape)
        new_queries.append(
            QueryRecord(FeatureMap(h, w, c, _quantize(rows)), _quantize(g),
                        q.label, q.split)
        )
    return replace(pack, queries=new_queries)
