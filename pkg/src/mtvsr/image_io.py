"""NIfTI-1 and raw+JSON volume I/O, and the JSON run report.

Extension dispatch:

* ``.nii`` / ``.nii.gz`` -- single-file NIfTI-1 (written as float32,
  ``vox_offset`` 352, sform = affine, missing voxels as NaN).
* ``.rawvol.json`` -- JSON sidecar (dims, affine, mask run lengths)
  next to a little-endian float32 payload ``<stem>.rawvol.raw``.
"""

from dataclasses import asdict, dataclass, field
import gzip
import json
import logging
import math
import os

import numpy as np

from .volume import Volume

logger = logging.getLogger(__name__)

__all__ = ["NiftiHeader", "RunReport", "read_volume", "write_volume", "write_report", "read_report"]

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"),
    ("extents", "i4"), ("session_error", "i2"), ("regular", "S1"),
    ("dim_info", "u1"), ("dim", "i2", (8,)), ("intent_p1", "f4"),
    ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"),
    ("pixdim", "f4", (8,)), ("vox_offset", "f4"), ("scl_slope", "f4"),
    ("scl_inter", "f4"), ("slice_end", "i2"), ("slice_code", "u1"),
    ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"),
    ("glmin", "i4"), ("descrip", "S80"), ("aux_file", "S24"),
    ("qform_code", "i2"), ("sform_code", "i2"), ("quatern_b", "f4"),
    ("quatern_c", "f4"), ("quatern_d", "f4"), ("qoffset_x", "f4"),
    ("qoffset_y", "f4"), ("qoffset_z", "f4"), ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)), ("intent_name", "S16"),
    ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348

DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
VOX_OFFSET = 352


@dataclass
class NiftiHeader:
    dims: tuple
    datatype: int
    pixdim: np.ndarray
    affine: np.ndarray
    scl_slope: float
    scl_inter: float
    vox_offset: int
    byteorder: str

    @classmethod
    def parse(cls, raw):
        if len(raw) < 348:
            raise ValueError("file too short for a NIfTI-1 header")
        hdr = None
        for order in "<>":
            cand = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
            if cand["sizeof_hdr"] == 348:
                hdr, byteorder = cand, order
                break
        if hdr is None:
            raise ValueError("sizeof_hdr is not 348; not a NIfTI-1 file")
        if hdr["magic"] not in (b"n+1", b"ni1"):
            raise ValueError(f"bad NIfTI magic {hdr['magic']!r}")
        dim = [int(d) for d in hdr["dim"]]
        ndim = dim[0]
        shape = dim[1:1 + ndim]
        while len(shape) > 3 and shape[-1] == 1:
            shape.pop()
        while len(shape) < 3:
            shape.append(1)
        if len(shape) != 3:
            raise ValueError(f"expected a 3-D image, got dims {dim[1:1 + ndim]}")
        datatype = int(hdr["datatype"])
        if datatype not in DATATYPES:
            raise ValueError(f"unsupported NIfTI datatype code {datatype}")
        return cls(
            dims=tuple(shape),
            datatype=datatype,
            pixdim=np.array(hdr["pixdim"], dtype=np.float64),
            affine=_header_affine(hdr),
            scl_slope=float(hdr["scl_slope"]),
            scl_inter=float(hdr["scl_inter"]),
            vox_offset=int(hdr["vox_offset"]),
            byteorder=byteorder,
        )


def _quaternion_affine(hdr):
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pix = hdr["pixdim"]
    qfac = -1.0 if pix[0] < 0 else 1.0
    out = np.eye(4)
    out[:3, :3] = rot @ np.diag([pix[1], pix[2], qfac * pix[3]])
    out[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return out


def _header_affine(hdr):
    sform = None
    if hdr["sform_code"] > 0:
        sform = np.eye(4)
        sform[0], sform[1], sform[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        if abs(np.linalg.det(sform[:3, :3])) < 1e-12:
            sform = None
    qform = _quaternion_affine(hdr) if hdr["qform_code"] > 0 else None
    if sform is not None:
        if qform is not None and not np.allclose(sform, qform, atol=1e-3):
            logger.warning("sform and qform disagree; using sform")
        return sform
    if qform is not None:
        return qform
    pix = [float(p) if p > 0 else 1.0 for p in hdr["pixdim"][1:4]]
    return np.diag(pix + [1.0])


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_nifti(path):
    with _open(path, "rb") as f:
        raw = f.read()
    hdr = NiftiHeader.parse(raw)
    if hdr.vox_offset < 348:
        raise ValueError("vox_offset points inside the header")
    dtype = np.dtype(DATATYPES[hdr.datatype]).newbyteorder(hdr.byteorder)
    count = int(np.prod(hdr.dims))
    if len(raw) < hdr.vox_offset + count * dtype.itemsize:
        raise ValueError("file truncated: not enough voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=hdr.vox_offset)
    data = data.reshape(hdr.dims, order="F")
    # slope 0 means "no scaling" in NIfTI-1
    if hdr.scl_slope != 0.0 and np.isfinite(hdr.scl_slope) and (hdr.scl_slope, hdr.scl_inter) != (1.0, 0.0):
        data = data.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    return Volume(data.astype(np.float32), hdr.affine)


def _write_nifti(v, path):
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *v.dims, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    vs = v.voxel_size
    hdr["pixdim"] = [1.0, vs[0], vs[1], vs[2], 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = v.affine[0], v.affine[1], v.affine[2]
    hdr["magic"] = b"n+1"
    payload = v.with_nan().astype("<f4").tobytes(order="F")
    with _open(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00" * (VOX_OFFSET - 348))
        f.write(payload)


def _mask_rle(mask):
    flat = mask.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def _mask_from_rle(runs, shape):
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        flat[pos:pos + r] = val
        pos += r
        val = not val
    return flat.reshape(shape)


def _raw_payload_path(path):
    return str(path)[: -len(".json")] + ".raw"


def _read_rawvol(path):
    with open(path) as f:
        meta = json.load(f)
    dims = tuple(meta["dims"])
    data = np.fromfile(_raw_payload_path(path), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError("raw payload size does not match dims")
    data = data.reshape(dims)
    mask = _mask_from_rle(meta["mask_rle"], dims)
    return Volume(data, np.array(meta["affine"]), mask)


def _write_rawvol(v, path):
    meta = {"dims": list(v.dims), "affine": v.affine.tolist(), "mask_rle": _mask_rle(v.mask)}
    v.with_nan().astype("<f4").tofile(_raw_payload_path(path))
    with open(path, "w") as f:
        json.dump(meta, f)


def read_volume(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    if path.endswith(".rawvol.json"):
        return _read_rawvol(path)
    if path.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    raise ValueError(f"unrecognised volume extension: {path}")


def write_volume(v, path):
    path = os.fspath(path)
    if path.endswith(".rawvol.json"):
        _write_rawvol(v, path)
    elif path.endswith((".nii", ".nii.gz")):
        _write_nifti(v, path)
    else:
        raise ValueError(f"unrecognised volume extension: {path}")


@dataclass
class RunReport:
    """Everything needed to audit a reconstruction run.

    JSON keys (stable): ``method``, ``channels``, ``tau`` (per channel, list
    of per-observation precisions), ``lam``, ``mu``, ``rho``,
    ``objective_trace`` (initial value first), ``iterations``,
    ``converged``, ``wall_seconds``, ``inner_solver``, ``overrides``,
    ``notes``, ``error`` (message when the run failed, else null).
    """

    method: str
    channels: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    rho: float = None
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_seconds: float = 0.0
    inner_solver: str = None
    overrides: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    error: str = None

    def validate(self):
        # baselines without a solver carry no trace at all
        if self.objective_trace and len(self.objective_trace) != self.iterations + 1:
            raise ValueError(
                f"objective trace has {len(self.objective_trace)} entries for "
                f"{self.iterations} iterations (expected iterations + 1)"
            )
        # a run that failed before iterating has nothing to trace
        if self.error is None and not self.objective_trace and self.method in ("fot", "tv", "mtv", "denoise"):
            raise ValueError("solver reports must include the initial objective value")

    def to_dict(self):
        self.validate()
        d = asdict(self)
        d["objective_trace"] = [float(x) for x in self.objective_trace]
        return d


def write_report(report, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)


def read_report(path):
    with open(path) as f:
        return RunReport(**json.load(f))
