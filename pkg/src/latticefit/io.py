"""File formats: frames (16-bit PGM or CSV) with key-value metadata sidecars,
JSON-lines atom records, key-value config files, and campaign output."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import DataError
from .estimator import AtomRecord
from .pipeline import Frame, SENSOR_MAX
from .simulate import Campaign

SIDECAR_SUFFIX = ".meta"


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2D count array as binary 16-bit PGM (P5, big-endian samples)."""
    v = np.asarray(values)
    data = np.clip(np.rint(v), 0, SENSOR_MAX).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{SENSOR_MAX}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by write_pgm (or any 8/16-bit P5 file)."""
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    offset = m.end()
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if data.size != count:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(float)


def write_frame_csv(path, values: np.ndarray) -> None:
    """CSV frame: one line per sensor row."""
    np.savetxt(path, np.asarray(values), delimiter=",", fmt="%.6g")


def read_frame_csv(path) -> np.ndarray:
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed CSV frame: {exc}") from exc
    return values


def write_kv(path, entries: dict) -> None:
    """Plain 'key value' text file, one entry per line."""
    with open(path, "w", encoding="ascii") as fh:
        for key, val in entries.items():
            fh.write(f"{key} {val}\n")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition(" ")
            out[key] = val.strip()
    return out


def sidecar_path(frame_path) -> Path:
    return Path(frame_path).with_suffix(SIDECAR_SUFFIX)


def save_frame(frame: Frame, path) -> None:
    """Write a frame (by extension: .pgm or .csv) plus its metadata sidecar."""
    path = Path(path)
    if path.suffix == ".pgm":
        write_pgm(path, frame.values)
    elif path.suffix == ".csv":
        write_frame_csv(path, frame.values)
    else:
        raise DataError(f"unsupported frame format {path.suffix!r}")
    write_kv(sidecar_path(path), {
        "pixel_scale_nm": repr(frame.pixel_scale),
        "exposure_s": repr(frame.exposure),
        "sequence_id": frame.sequence_id,
    })


def load_frame(path) -> Frame:
    """Read a frame file and its sidecar; frame_id is the file stem."""
    path = Path(path)
    if path.suffix == ".pgm":
        values = read_pgm(path)
    elif path.suffix == ".csv":
        values = read_frame_csv(path)
    else:
        raise DataError(f"unsupported frame format {path.suffix!r}")
    meta: dict[str, str] = {}
    sc = sidecar_path(path)
    if sc.exists():
        meta = read_kv(sc)
    return Frame(
        values=values,
        pixel_scale=float(meta.get("pixel_scale_nm", 1.0)),
        frame_id=path.stem,
        sequence_id=meta.get("sequence_id", ""),
        exposure=float(meta.get("exposure_s", 1.0)),
    )


def list_frame_files(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix in (".pgm", ".csv"))


def write_records(records: list[AtomRecord], path) -> None:
    """Atom records as JSON lines, one record per atom."""
    with open(path, "w", encoding="ascii") as fh:
        for r in records:
            fh.write(json.dumps({
                "frame_id": r.frame_id,
                "sequence_id": r.sequence_id,
                "roi_id": r.roi_id,
                "position_nm": r.position_nm,
                "amplitude": r.amplitude,
                "reliable": r.reliable,
                "diagnostics": r.diagnostics,
            }) + "\n")


def read_records(path) -> list[AtomRecord]:
    records = []
    with open(path, encoding="ascii") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                records.append(AtomRecord(
                    frame_id=d["frame_id"],
                    sequence_id=d["sequence_id"],
                    roi_id=int(d["roi_id"]),
                    position_nm=float(d["position_nm"]),
                    amplitude=float(d["amplitude"]),
                    reliable=bool(d["reliable"]),
                    diagnostics=d.get("diagnostics", {}),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: malformed record: {exc}") from exc
    return records


def write_campaign(campaign: Campaign, out_dir) -> None:
    """Write frames as PGM + sidecars, the manifest, and the config snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for frame in campaign.frames:
        save_frame(frame, out / f"{frame.frame_id}.pgm")
    with open(out / "manifest.json", "w", encoding="ascii") as fh:
        json.dump(campaign.manifest, fh, indent=1)
    write_kv(out / "config.txt", {
        k: repr(v) for k, v in campaign.manifest["config"].items()
    })
