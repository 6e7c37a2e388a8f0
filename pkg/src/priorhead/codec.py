"""Keypoint + expression bitstream (``.kpx``) with exact byte accounting.

Byte layout, little-endian throughout::

    header   magic "KPX1" | version u8 | K u8 | E u8 | plan indices K x u8 | fps_num u16 | fps_den u16
    record   rotation 3 | translation 3 | jaw 3 | keypoints 3K | expression E   (all float16)

The header is ``11 + K`` bytes and every record ``2 * (9 + 3K + E)`` bytes.
There is no entropy coding, so file size is exactly header + n * record.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .keypoints import KeypointFrame
from .networks import ExpressionFeature
from .prior import EXPR_DIM, N_LANDMARKS, FaceParams, axis_angle_to_matrix, matrix_to_axis_angle

MAGIC = b"KPX1"
VERSION = 1
_FIXED = struct.Struct("<4sBBB")
_FPS = struct.Struct("<HH")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class StreamHeader:
    K: int
    E: int
    plan_indices: Tuple[int, ...]
    fps_num: int = 25
    fps_den: int = 1
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "plan_indices", tuple(int(i) for i in self.plan_indices))
        if not 1 <= self.K <= N_LANDMARKS:
            raise ValueError(f"K must be in [1, {N_LANDMARKS}], got {self.K}")
        if not 0 <= self.E <= EXPR_DIM:
            raise ValueError(f"E must be in [0, {EXPR_DIM}], got {self.E}")
        idx = self.plan_indices
        if len(idx) != self.K or any(b <= a for a, b in zip(idx, idx[1:])) or \
                (idx and (idx[0] < 0 or idx[-1] >= N_LANDMARKS)):
            raise ValueError("plan indices must be K strictly increasing landmark ids")
        if not (0 < self.fps_num < 65536 and 0 < self.fps_den < 65536):
            raise ValueError("fps numerator/denominator must fit in uint16 and be positive")

    @property
    def size(self) -> int:
        return _FIXED.size + self.K + _FPS.size

    @property
    def record_size(self) -> int:
        return 2 * (9 + 3 * self.K + self.E)

    def to_bytes(self) -> bytes:
        return (_FIXED.pack(MAGIC, self.version, self.K, self.E) + bytes(self.plan_indices)
                + _FPS.pack(self.fps_num, self.fps_den))

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamHeader":
        if len(data) < _FIXED.size:
            raise FormatError("stream too short for a header")
        magic, version, K, E = _FIXED.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported stream version {version}")
        end = _FIXED.size + K + _FPS.size
        if len(data) < end:
            raise FormatError("truncated header")
        plan = tuple(data[_FIXED.size:_FIXED.size + K])
        num, den = _FPS.unpack_from(data, _FIXED.size + K)
        try:
            return cls(K, E, plan, num, den, version)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc


def bitrate(header: StreamHeader, frame_count: int) -> Tuple[int, int]:
    """``(bytes_per_frame, total_bytes)`` for ``frame_count`` frames."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    return header.record_size, header.size + frame_count * header.record_size


def encode_frame(kf: KeypointFrame, params: FaceParams, E: int, header: StreamHeader = None) -> bytes:
    """Quantize one frame to float16: rotation, translation, jaw, keypoints, first ``E`` expression entries."""
    if not 0 <= E <= EXPR_DIM:
        raise ValueError(f"E must be in [0, {EXPR_DIM}], got {E}")
    if header is not None and (kf.K != header.K or E != header.E):
        raise ValueError(f"frame has K={kf.K}, E={E} but the stream header says K={header.K}, E={header.E}")
    vals = np.concatenate([matrix_to_axis_angle(kf.rotation), kf.translation, params.jaw,
                           kf.keypoints.reshape(-1), params.expression[:E]])
    if not np.all(np.abs(vals) <= np.finfo(np.float16).max):
        raise ValueError("frame values overflow half precision")
    return vals.astype("<f2").tobytes()


def decode_frame(record: bytes, header: StreamHeader) -> Tuple[KeypointFrame, ExpressionFeature]:
    if len(record) != header.record_size:
        raise FormatError(f"record has {len(record)} bytes, expected {header.record_size}")
    v = np.frombuffer(record, dtype="<f2").astype(np.float64)
    K = header.K
    rot, trans, jaw = v[0:3], v[3:6], v[6:9]
    kps = v[9:9 + 3 * K].reshape(K, 3)
    expr = v[9 + 3 * K:]
    return KeypointFrame(axis_angle_to_matrix(rot), trans, kps), ExpressionFeature(np.concatenate([expr, jaw]))


def encode_stream(header: StreamHeader, frames: Iterable[Tuple[KeypointFrame, FaceParams]]) -> bytes:
    parts = [header.to_bytes()]
    for kf, params in frames:
        parts.append(encode_frame(kf, params, header.E, header))
    return b"".join(parts)


def decode_stream(data: bytes) -> Tuple[StreamHeader, List[Tuple[KeypointFrame, ExpressionFeature]]]:
    header = StreamHeader.from_bytes(data)
    body = data[header.size:]
    n, rem = divmod(len(body), header.record_size)
    if rem:
        raise FormatError(f"stream ends with a truncated record ({rem} stray bytes)")
    rs = header.record_size
    return header, [decode_frame(body[i * rs:(i + 1) * rs], header) for i in range(n)]


def write_stream(path, header: StreamHeader, frames: Sequence[Tuple[KeypointFrame, FaceParams]]) -> int:
    from .data import atomic_write

    data = encode_stream(header, frames)
    atomic_write(path, data)
    return len(data)


def read_stream(path):
    with open(path, "rb") as f:
        return decode_stream(f.read())


# ---------------------------------------------------------------- rate sweep

@dataclass
class SweepRow:
    K: int
    E: int
    bytes_per_frame: int
    AKD: float
    AKD_M: float
    AEMOD: float


def rate_sweep(layout, synthesizers, grid: Sequence[Tuple[int, int]], registry, video_ids=None,
               source_index: int = 0, max_frames: int = None) -> List[SweepRow]:
    """Encode, decode, synthesize and score every test video at each (K, E) grid point.

    ``synthesizers`` maps K to a :class:`~priorhead.pipeline.Synthesizer` (or a
    checkpoint path); each checkpoint carries its own keypoint plan, so every K
    in the grid needs a matching checkpoint.  The source frame is excluded from
    the scored frames.
    """
    from .metrics import akd, aemod
    from .pipeline import PlanMismatchError, Synthesizer

    syns = {}
    for k, s in dict(synthesizers).items():
        syns[int(k)] = s if isinstance(s, Synthesizer) else Synthesizer.from_checkpoint(s)
        if syns[int(k)].K != int(k):
            raise PlanMismatchError(f"checkpoint registered for K={k} was trained with K={syns[int(k)].K}")
    ids = list(video_ids) if video_ids is not None else layout.video_ids("test")
    data = {}
    for vid in ids:
        frames, params = layout.load_frames(vid), layout.load_params(vid)
        if max_frames is not None:
            frames, params = frames[:max_frames], params[:max_frames]
        data[vid] = (frames, params)
    rows = []
    for K, E in grid:
        if K not in syns:
            raise PlanMismatchError(f"no checkpoint for K={K}")
        syn = syns[K]
        header = StreamHeader(K, E, syn.plan.indices)
        gen, ref = [], []
        for vid, (frames, params) in data.items():
            src = params[source_index]
            drive = [i for i in range(len(params)) if i != source_index]
            stream = encode_stream(header, [(syn.swap_keypoints(src, params[i]), params[i]) for i in drive])
            hdr, decoded = decode_stream(stream)
            syn.check_plan(hdr.plan_indices)
            gen.append(syn.render(frames[source_index], syn.keypoints(src),
                                  [kf for kf, _ in decoded], [ex for _, ex in decoded]))
            ref.append(frames[drive])
        gen, ref = np.concatenate(gen), np.concatenate(ref)
        rows.append(SweepRow(K, E, header.record_size,
                             akd(gen, ref, registry.keypoint_detector, "all"),
                             akd(gen, ref, registry.keypoint_detector, "mouth"),
                             aemod(gen, ref, registry.emotion_embedder)))
    return rows


SWEEP_COLUMNS = ("K", "E", "bytes_per_frame", "AKD", "AKD-M", "AEMOD")


def write_sweep(path, rows: Sequence[SweepRow], delimiter: str = "\t"):
    with open(path, "w") as f:
        f.write(delimiter.join(SWEEP_COLUMNS) + "\n")
        for r in rows:
            f.write(delimiter.join([str(r.K), str(r.E), str(r.bytes_per_frame),
                                    f"{r.AKD:.6g}", f"{r.AKD_M:.6g}", f"{r.AEMOD:.6g}"]) + "\n")
