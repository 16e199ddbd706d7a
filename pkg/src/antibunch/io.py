"""File formats: timestamp streams, histograms, tables, run manifests.

Binary timestamps: ``b"ABT1"``, little-endian ``u16`` schema version and
``u16`` channel count, then packed records of ``u8`` channel id and ``u64``
time in ps.  CSV timestamps use the header ``channel,t_ps``.  Histograms are
CSV ``tau_ps,raw,normalized,sigma`` preceded by ``# key: value`` metadata.
Floats are written with ``repr`` so every round trip is lossless.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import sys
from typing import Dict, Sequence

import numpy as np

from .correlator import CorrelationHistogram
from .sim import TimestampStream

MAGIC = b"ABT1"
TIMESTAMP_SCHEMA = 1
RECORD = np.dtype([("channel", "u1"), ("t", "<u8")])
_HEADER = struct.Struct("<4sHH")


class FormatError(ValueError):
    pass


def _is_stdio(path):
    return path in (None, "-")


def timestamps_to_bytes(stream: TimestampStream, fmt: str = "binary") -> bytes:
    if np.any(stream.times < 0):
        raise FormatError("negative timestamps cannot be stored")
    if fmt == "binary":
        rec = np.empty(len(stream), dtype=RECORD)
        rec["channel"] = stream.channels
        rec["t"] = stream.times
        return _HEADER.pack(MAGIC, TIMESTAMP_SCHEMA, len(stream.channel_ids())) + rec.tobytes()
    if fmt == "csv":
        lines = ["channel,t_ps"]
        lines += [f"{c},{t}" for c, t in zip(stream.channels.tolist(), stream.times.tolist())]
        return ("\n".join(lines) + "\n").encode()
    raise FormatError(f"unknown timestamp format {fmt!r}")


def write_bytes(path, data: bytes):
    """Write ``data`` to ``path`` (``"-"`` for stdout)."""
    if _is_stdio(path):
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        with open(path, "wb") as fh:
            fh.write(data)


def read_bytes(path) -> bytes:
    """Read ``path`` (``"-"`` for stdin) as bytes."""
    if _is_stdio(path):
        return sys.stdin.buffer.read()
    with open(path, "rb") as fh:
        return fh.read()


def write_timestamps(path, stream: TimestampStream, fmt: str = "binary"):
    write_bytes(path, timestamps_to_bytes(stream, fmt))


def parse_timestamps(data: bytes, duration=None) -> TimestampStream:
    """Decode binary or CSV timestamp bytes (format sniffed from the magic)."""
    if data[:4] == MAGIC:
        if len(data) < _HEADER.size:
            raise FormatError("truncated timestamp header")
        _, version, n_ch = _HEADER.unpack_from(data)
        if version != TIMESTAMP_SCHEMA:
            raise FormatError(f"unsupported timestamp schema version {version}")
        body = data[_HEADER.size:]
        if len(body) % RECORD.itemsize:
            raise FormatError("truncated timestamp record")
        rec = np.frombuffer(body, dtype=RECORD)
        ch = rec["channel"].copy()
        t = rec["t"].astype(np.int64)
        if len(np.unique(ch)) != n_ch:
            raise FormatError("channel count in header does not match the records")
    else:
        text = data.decode("utf-8")
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].replace(" ", "") != "channel,t_ps":
            raise FormatError("not a timestamp file: expected magic ABT1 or CSV header "
                              "'channel,t_ps'")
        if len(lines) > 1:
            arr = np.loadtxt(lines[1:], delimiter=",", dtype=np.int64, ndmin=2)
            ch, t = arr[:, 0].astype(np.uint8), arr[:, 1]
        else:
            ch, t = np.zeros(0, np.uint8), np.zeros(0, np.int64)
    if duration is None:
        duration = float(t.max() + 1) if len(t) else 1.0
    stream = TimestampStream(ch, t, float(duration))
    stream.metadata["counts"] = stream.counts()
    return stream


def read_timestamps(path, duration=None) -> TimestampStream:
    """Read a timestamp file (``"-"`` for stdin).

    Times count from the start of acquisition; without an explicit
    ``duration`` (ps) the window ``[0, last event]`` is used.
    """
    return parse_timestamps(read_bytes(path), duration)


def _fmt(v):
    return repr(float(v))


def histogram_to_text(h: CorrelationHistogram) -> str:
    meta = {
        "mode": h.mode,
        "start_channel": h.start_channel,
        "stop_channel": h.stop_channel,
        "bin_width_ps": _fmt(h.bin_width),
        "half_bins": h.half_bins,
        "start_counts": _fmt(h.start_counts),
        "stop_counts": _fmt(h.stop_counts),
        "integration_ps": _fmt(h.duration_ps),
        "dt_int_s": _fmt(h.dt_int),
        "n_start_per_s": _fmt(h.n_start),
        "n_stop_per_s": _fmt(h.n_stop),
        "dt_mca_s": _fmt(h.bin_width * 1e-12),
        "normalized": "true" if h.is_normalized else "false",
    }
    out = [f"# {k}: {v}" for k, v in meta.items()]
    out.append("tau_ps,raw,normalized,sigma")
    norm = h.normalized if h.is_normalized else [None] * len(h.raw)
    sig = h.sigma if h.is_normalized else [None] * len(h.raw)
    for tau, raw, nv, sv in zip(h.taus, h.raw, norm, sig):
        out.append(",".join([_fmt(tau), str(int(raw)),
                             "" if nv is None else _fmt(nv),
                             "" if sv is None else _fmt(sv)]))
    return "\n".join(out) + "\n"


def write_histogram(path, h: CorrelationHistogram):
    write_bytes(path, histogram_to_text(h).encode())


def parse_histogram(text: str) -> CorrelationHistogram:
    meta = {}
    rows = []
    header_seen = False
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
            continue
        if not header_seen:
            if line.strip() != "tau_ps,raw,normalized,sigma":
                raise FormatError("histogram header must be 'tau_ps,raw,normalized,sigma'")
            header_seen = True
            continue
        rows.append(line.split(","))
    try:
        bw = float(meta["bin_width_ps"])
        half = int(meta["half_bins"])
        h = CorrelationHistogram(
            bw, half, np.array([int(r[1]) for r in rows], dtype=np.int64),
            float(meta["start_counts"]), float(meta["stop_counts"]),
            float(meta["integration_ps"]), meta["mode"],
            int(meta["start_channel"]), int(meta["stop_channel"]))
    except KeyError as exc:
        raise FormatError(f"histogram metadata is missing {exc.args[0]!r}") from None
    if len(rows) != 2 * half + 1:
        raise FormatError("histogram row count does not match half_bins")
    if meta.get("normalized") == "true":
        h.normalized = np.array([float(r[2]) for r in rows])
        h.sigma = np.array([float(r[3]) for r in rows])
    return h


def read_histogram(path) -> CorrelationHistogram:
    return parse_histogram(read_bytes(path).decode("utf-8"))


def table_to_text(columns: Dict[str, Sequence], comments: Sequence[str] = ()) -> str:
    """Plain CSV table, optional ``#`` comment lines first."""
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(names))
    for row in zip(*cols):
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_table(path, columns: Dict[str, Sequence], comments: Sequence[str] = ()):
    write_bytes(path, table_to_text(columns, comments).encode())


def parse_table(text: str) -> Dict[str, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise FormatError("empty table")
    names = lines[0].split(",")
    data = [[float(v) if v != "" else np.nan for v in ln.split(",")] for ln in lines[1:]]
    arr = np.array(data, dtype=float).reshape(len(data), len(names))
    return {n: arr[:, i] for i, n in enumerate(names)}


def read_table(path) -> Dict[str, np.ndarray]:
    return parse_table(read_bytes(path).decode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def json_text(obj) -> str:
    """Deterministic JSON; non-finite floats become null."""
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    write_bytes(path, json_text(obj).encode())
