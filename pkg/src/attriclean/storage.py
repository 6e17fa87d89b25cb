"""On-disk formats. Byte layouts are documented in docs/formats.md.

All binary numbers are little-endian. Nothing in a corpus directory records
corruption; the ground-truth ledger is a separate file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .synthdata import TARGETS, StemSet

WAVE_SUFFIX = ".f32"
SONG_META = "song.json"
UNKNOWN = "unknown"

CKPT_MAGIC = b"ACKP"
CKPT_VERSION = 1
MATRIX_MAGIC = b"ATRM"
MATRIX_VERSION = 1
SCORE_HEADER = "# attriclean score table v1"


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- waveforms ---------------------------------------------------------------

def write_waveform(path, samples: np.ndarray, sample_rate: int, stem: str):
    """Raw float32 LE samples at ``path`` plus ``<path>.json`` sidecar."""
    path = Path(path)
    data = np.asarray(samples, dtype="<f4")
    atomic_write(path, data.tobytes())
    atomic_write(path.with_suffix(".json"), dump_json(
        {"sample_rate": int(sample_rate), "length": int(data.size), "stem": stem,
         "format": "float32le"}))


def read_waveform(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    x = np.fromfile(path, dtype="<f4").astype(np.float64)
    if x.size != meta["length"]:
        raise FormatError(f"{path}: expected {meta['length']} samples, found {x.size}")
    return x, meta


# -- corpora -----------------------------------------------------------------

def ledger_path(corpus_dir) -> Path:
    corpus_dir = Path(corpus_dir)
    return corpus_dir.parent / f"{corpus_dir.name}.ledger.json"


def write_corpus(songs: list[StemSet], out_dir, ledger: Path | None = None):
    """One subdirectory per song; tags go to the ledger file only."""
    out_dir = Path(out_dir)
    for s in songs:
        d = out_dir / s.id
        write_waveform(d / f"mixture{WAVE_SUFFIX}", s.mixture, s.sample_rate, "mixture")
        for t in TARGETS:
            write_waveform(d / f"{t}{WAVE_SUFFIX}", s.stems[t], s.sample_rate, t)
        atomic_write(d / SONG_META, dump_json(
            {"id": s.id, "seed": int(s.seed), "sample_rate": s.sample_rate,
             "stems": list(TARGETS)}))
    ledger = ledger or ledger_path(out_dir)
    atomic_write(ledger, dump_json({s.id: s.corruption for s in songs}))
    return ledger


def read_song(song_dir) -> StemSet:
    song_dir = Path(song_dir)
    meta = json.loads((song_dir / SONG_META).read_text())
    stems = {t: read_waveform(song_dir / f"{t}{WAVE_SUFFIX}")[0] for t in meta["stems"]}
    mixture, wmeta = read_waveform(song_dir / f"mixture{WAVE_SUFFIX}")
    return StemSet(meta["id"], stems, mixture, corruption=UNKNOWN, seed=meta["seed"],
                   sample_rate=wmeta["sample_rate"])


def read_corpus(corpus_dir) -> list[StemSet]:
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory {corpus_dir} not found")
    dirs = sorted(p for p in corpus_dir.iterdir() if (p / SONG_META).is_file())
    return [read_song(d) for d in dirs]


def read_ledger(path) -> dict[str, str]:
    return json.loads(Path(path).read_text())


def quantize(s: StemSet) -> StemSet:
    """Round a song through float32 exactly as a write/read cycle would."""
    stems = {t: s.stems[t].astype("<f4").astype(np.float64) for t in s.stems}
    mixture = s.mixture.astype("<f4").astype(np.float64)
    return StemSet(s.id, stems, mixture, s.corruption, s.seed, s.sample_rate, dict(s.meta))


# -- checkpoints -------------------------------------------------------------

def checkpoint_bytes(params: dict) -> bytes:
    """ACKP | u16 version | u16 n_targets | per target:
    u16 name_len | name utf-8 | u32 n_bins | u32 n_hidden | u64 n_params | f64[n_params]."""
    out = [CKPT_MAGIC, struct.pack("<HH", CKPT_VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<IIQ", p.n_bins, p.n_hidden, p.theta.size))
        out.append(np.asarray(p.theta, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(data: bytes) -> dict:
    from .sepmodel import ModelParams

    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off); off += 2
        name = data[off:off + n].decode(); off += n
        n_bins, n_hidden, size = struct.unpack_from("<IIQ", data, off); off += 16
        theta = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64)
        off += 8 * size
        params[name] = ModelParams(theta, name, n_bins, n_hidden)
    return params


def checksum(params: dict) -> bytes:
    return hashlib.sha256(checkpoint_bytes(params)).digest()


def write_checkpoint(ckpt_dir, params: dict, log: dict | None = None):
    ckpt_dir = Path(ckpt_dir)
    atomic_write(ckpt_dir / "model.ckpt", checkpoint_bytes(params))
    if log is not None:
        lines = [json.dumps({"target": t, "epoch": r.epoch, "train_loss": r.train_loss,
                             "val_loss": r.val_loss})
                 for t, records in log.items() for r in records]
        atomic_write(ckpt_dir / "train_log.jsonl", "\n".join(lines) + "\n")


def read_checkpoint(ckpt_dir) -> dict:
    return params_from_bytes((Path(ckpt_dir) / "model.ckpt").read_bytes())


# -- attribution matrices ----------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data, off):
    (n,) = struct.unpack_from("<H", data, off)
    return data[off + 2:off + 2 + n].decode(), off + 2 + n


def matrix_bytes(a, baseline_checksum: bytes = b"\0" * 32) -> bytes:
    """ATRM | u16 version | u32 N | u32 M | u16 K | 32-byte baseline sha256 |
    K target names | N song ids | M ref ids (each u16 len + utf-8) |
    f64 delta[N, M, K] (C order) | f64 baseline_loss[N, K]."""
    n, m, k = a.delta.shape
    out = [MATRIX_MAGIC, struct.pack("<HIIH", MATRIX_VERSION, n, m, k), baseline_checksum[:32]]
    out += [_pack_str(t) for t in a.targets]
    out += [_pack_str(s) for s in a.song_ids]
    out += [_pack_str(s) for s in a.ref_ids]
    out.append(np.ascontiguousarray(a.delta, dtype="<f8").tobytes())
    out.append(np.ascontiguousarray(a.baseline, dtype="<f8").tobytes())
    return b"".join(out)


def matrix_from_bytes(data: bytes):
    from .attribution import AttributionMatrix

    if data[:4] != MATRIX_MAGIC:
        raise FormatError("not an attribution matrix (bad magic)")
    version, n, m, k = struct.unpack_from("<HIIH", data, 4)
    if version != MATRIX_VERSION:
        raise FormatError(f"unsupported matrix version {version}")
    off = 16
    digest = data[off:off + 32]; off += 32
    targets, songs, refs = [], [], []
    for bucket, count in ((targets, k), (songs, n), (refs, m)):
        for _ in range(count):
            s, off = _unpack_str(data, off)
            bucket.append(s)
    delta = np.frombuffer(data, "<f8", n * m * k, off).reshape(n, m, k).astype(np.float64)
    off += 8 * n * m * k
    baseline = np.frombuffer(data, "<f8", n * k, off).reshape(n, k).astype(np.float64)
    a = AttributionMatrix(delta, baseline, songs, refs, tuple(targets),
                          ref_targets={t: list(range(m)) for t in targets})
    return a, digest


def is_matrix_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MATRIX_MAGIC


# -- score tables ------------------------------------------------------------

def score_table(ids, scores, method: str, higher_is_better: bool,
                per_target: dict[str, np.ndarray] | None = None) -> str:
    cols = ["song_id", "score"] + list(per_target or {})
    lines = [SCORE_HEADER,
             f"# method={method} higher_is_better={int(higher_is_better)}",
             "\t".join(cols)]
    for i, sid in enumerate(ids):
        row = [sid, f"{float(scores[i]):.17g}"]
        row += [f"{float(per_target[t][i]):.17g}" for t in (per_target or {})]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def read_score_table(path) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCORE_HEADER:
        raise FormatError(f"{path}: not a score table")
    meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("# ").split())
    cols = lines[2].split("\t")
    rows = [ln.split("\t") for ln in lines[3:] if ln]
    ids = [r[0] for r in rows]
    data = {c: np.array([float(r[i]) for r in rows]) for i, c in enumerate(cols) if i > 0}
    return {"method": meta["method"], "higher_is_better": meta["higher_is_better"] == "1",
            "ids": ids, "score": data.pop("score"), "per_target": data}

