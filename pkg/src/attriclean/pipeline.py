"""End-to-end cleaning experiments: train a baseline on the contaminated corpus,
score every song with a cleaning method, filter at each retention ratio,
retrain, and evaluate SDR on a held-out clean set."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attribution, clsbaseline, fadfilter, sepmodel, storage
from .synthdata import CLEAN, TARGETS, CorpusSpec, StemSet, build_corpus, derive_seed

log = logging.getLogger(__name__)

METHODS = ("none", "unlearn_unified", "unlearn_per_target", "fad", "cls")
ORACLES = ("oracle_clean", "oracle_refs")
BLIND = "unknown"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusSpec = CorpusSpec()
    methods: tuple[str, ...] = ("unlearn_unified",)
    ratios: tuple[float, ...] = (0.75,)
    seeds: tuple[int, ...] = (1, 2, 3)
    # per-method ratio lists override ``ratios``
    method_ratios: dict = field(default_factory=dict)
    n_refs: int = 12
    n_eval: int = 27
    epochs: int = 60
    learning_rate: float = 1e-2
    batch: int = 64
    n_hidden: int = sepmodel.N_HIDDEN
    unlearn: attribution.UnlearnConfig = attribution.UnlearnConfig()
    cls_epochs: int = 30
    oracles: tuple[str, ...] = ()
    retrain: bool = True
    out_dir: str | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for o in self.oracles:
            if o not in ORACLES:
                raise ConfigError(f"unknown oracle {o!r}")
        for r in list(self.ratios) + [r for rs in self.method_ratios.values() for r in rs]:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"ratio {r} outside (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.n_refs < 1 or self.n_eval < 1:
            raise ConfigError("n_refs and n_eval must be >= 1")

    def ratios_for(self, method: str) -> tuple[float, ...]:
        return tuple(self.method_ratios.get(method, self.ratios))

    def train_config(self, seed: int) -> sepmodel.TrainConfig:
        return sepmodel.TrainConfig(self.epochs, self.learning_rate, self.batch, seed, self.n_hidden)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"method"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "method" in d:
            d["methods"] = [d.pop("method")]
        try:
            if "corpus" in d:
                d["corpus"] = CorpusSpec(**d["corpus"])
            if "unlearn" in d:
                d["unlearn"] = attribution.UnlearnConfig(**d["unlearn"])
            for key in ("methods", "ratios", "seeds", "oracles"):
                if key in d:
                    d[key] = tuple(d[key])
            if "method_ratios" in d:
                d["method_ratios"] = {k: tuple(v) for k, v in d["method_ratios"].items()}
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method_ratios"] = {k: list(v) for k, v in self.method_ratios.items()}
        return d


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return PipelineConfig.from_dict(raw)


def reference_spec(cfg: PipelineConfig) -> CorpusSpec:
    return CorpusSpec(cfg.n_refs, 0, 0, 0, cfg.corpus.song_length,
                      derive_seed(cfg.corpus.master_seed, "refs"), prefix="ref")


def eval_spec(cfg: PipelineConfig) -> CorpusSpec:
    return CorpusSpec(cfg.n_eval, 0, 0, 0, cfg.corpus.song_length,
                      derive_seed(cfg.corpus.master_seed, "eval"), prefix="eval")


def blind(songs: list[StemSet]) -> list[StemSet]:
    """Copies with the ground-truth tag and corruption metadata removed."""
    return [replace(s, corruption=BLIND, meta={}) for s in songs]


def gap_closed(dirty: float, cleaned: float, clean_ub: float) -> float:
    """Fraction of the dirty -> clean-upper-bound SDR gap recovered by cleaning."""
    if clean_ub == dirty:
        raise ZeroDivisionError("clean upper bound equals dirty baseline")
    return (cleaned - dirty) / (clean_ub - dirty)


def clean_fraction(ids, ledger: dict[str, str]) -> float:
    ids = list(ids)
    return sum(ledger[i] == CLEAN for i in ids) / len(ids) if ids else float("nan")


def corruption_split(retained, all_ids, ledger: dict[str, str]) -> tuple[float, float]:
    """Corrupted fraction of the removed set and of the retained set."""
    kept = set(retained)
    removed = [i for i in all_ids if i not in kept]
    frac = lambda xs: sum(ledger[i] != CLEAN for i in xs) / len(xs) if xs else float("nan")
    return frac(removed), frac([i for i in all_ids if i in kept])


def enrichment(retained, all_ids, ledger: dict[str, str]) -> float:
    """Corrupted fraction of the removed set over the corpus-wide corrupted fraction."""
    removed_frac, _ = corruption_split(retained, all_ids, ledger)
    prior = sum(ledger[i] != CLEAN for i in all_ids) / len(all_ids)
    return removed_frac / prior if prior > 0 else float("nan")


class StageCache:
    """Content-addressed store for trained per-target models.

    Always memoised in memory; also persisted (atomic publish) when a directory
    is given.
    """

    def __init__(self, directory=None):
        self.memory: dict[str, sepmodel.ModelParams] = {}
        self.directory = Path(directory) if directory else None
        self.hits = 0

    def get(self, key: str):
        if key in self.memory:
            self.hits += 1
            return self.memory[key]
        if self.directory and (self.directory / f"{key}.ckpt").is_file():
            params = storage.params_from_bytes((self.directory / f"{key}.ckpt").read_bytes())
            p = next(iter(params.values()))
            self.memory[key] = p
            self.hits += 1
            return p
        return None

    def put(self, key: str, p: sepmodel.ModelParams):
        self.memory[key] = p
        if self.directory:
            storage.atomic_write(self.directory / f"{key}.ckpt", storage.checkpoint_bytes({p.target: p}))


def corpus_fingerprint(songs: list[StemSet]) -> str:
    h = hashlib.sha256()
    for s in songs:
        h.update(s.id.encode())
        h.update(np.ascontiguousarray(s.mixture).tobytes())
        for t in TARGETS:
            h.update(np.ascontiguousarray(s.stems[t]).tobytes())
    return h.hexdigest()


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclass
class CleaningReport:
    config: dict
    rows: list[dict] = field(default_factory=list)
    retained: dict[str, object] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        """Deterministic serialisation; wall-clock timings are kept out."""
        return storage.dump_json({"config": self.config, "rows": self.rows})

    def retained_json(self) -> str:
        return storage.dump_json(self.retained)

    def ok_rows(self, method: str | None = None):
        return [r for r in self.rows if r["status"] == "ok" and (method is None or r["method"] == method)]

    def summary(self) -> list[dict]:
        """Seed-averaged rows keyed by (method, ratio)."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.ok_rows():
            groups.setdefault((r["method"], r["ratio"]), []).append(r)
        out = []
        for (method, ratio), rows in groups.items():
            entry = {"method": method, "ratio": ratio, "n_seeds": len(rows),
                     "n_retained": rows[0]["n_retained"],
                     "clean_fraction": _mean_or_none([r["clean_fraction"] for r in rows])}
            if rows[0].get("sdr"):
                for k in list(TARGETS) + ["mean"]:
                    entry[k] = float(np.mean([r["sdr"][k] for r in rows]))
            out.append(entry)
        return out

    def to_text(self) -> str:
        header = ["method", "r", "%clean", *TARGETS, "avg", "seeds"]
        lines = []
        for e in self.summary():
            sdr = [f"{e[k]:.2f}" if k in e else "-" for k in list(TARGETS) + ["mean"]]
            pct = "-" if e["clean_fraction"] is None else f"{100 * e['clean_fraction']:.0f}%"
            lines.append([e["method"], f"{e['ratio']:.2f}", pct,
                          *sdr, str(e["n_seeds"])])
        failed = [r for r in self.rows if r["status"] != "ok"]
        widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                    for i, (c, w) in enumerate(zip(row, widths)))
        text = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in lines]
        for r in failed:
            text.append(f"FAILED {r['method']} r={r['ratio']} seed={r['seed']}: {r['diagnostic']}")
        return "\n".join(text) + "\n"


def best_ratio(report: CleaningReport, method: str | None = None) -> float:
    """Ratio with the best seed-averaged mean SDR; ties go to the larger ratio."""
    rows = [r for r in report.ok_rows(method) if r.get("sdr") and r["method"] != "none"]
    if method == "none":
        rows = report.ok_rows("none")
    if not rows:
        raise ValueError("report has no evaluated rows")
    by_ratio: dict[float, list[float]] = {}
    for r in rows:
        by_ratio.setdefault(r["ratio"], []).append(r["sdr"]["mean"])
    return max(by_ratio, key=lambda k: (float(np.mean(by_ratio[k])), k))


class Experiment:
    """Holds the datasets of one pipeline run and the per-stage caches."""

    def __init__(self, cfg: PipelineConfig, corpus=None, refs=None, eval_set=None, ledger=None):
        self.cfg = cfg
        t0 = time.perf_counter()
        raw = corpus if corpus is not None else build_corpus(cfg.corpus)
        self.ledger = ledger if ledger is not None else {s.id: s.corruption for s in raw}
        self.corpus = blind(raw)
        self.refs = blind(refs if refs is not None else build_corpus(reference_spec(cfg)))
        self.eval_set = eval_set if eval_set is not None else build_corpus(eval_spec(cfg))
        self.ids = [s.id for s in self.corpus]
        self.by_id = {s.id: s for s in self.corpus}
        if set(self.ids) & {s.id for s in self.refs}:
            raise ConfigError("corpus and reference ids overlap")
        self.timings = {"generate": time.perf_counter() - t0}
        self.feats = dict(zip(self.ids, sepmodel.corpus_features(self.corpus)))
        self.ref_feats = sepmodel.corpus_features(self.refs)
        self.fingerprint = corpus_fingerprint(self.corpus + self.refs)
        self.cache = StageCache(cfg.cache_dir)
        self._fad = None
        self._attr: dict[int, attribution.AttributionMatrix] = {}

    def _tick(self, stage, t0):
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0

    def _key(self, target: str, ids, seed: int) -> str:
        payload = json.dumps([self.fingerprint, target, sorted(ids), seed,
                              asdict(self.cfg.train_config(seed))], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:32]

    def train_on(self, ids_by_target: dict[str, list[str]], seed: int) -> dict[str, sepmodel.ModelParams]:
        t0 = time.perf_counter()
        out = {}
        for t in TARGETS:
            ids = ids_by_target[t]
            key = self._key(t, ids, seed)
            p = self.cache.get(key)
            if p is None:
                feats = [self.feats[i] for i in sorted(ids)]
                p = sepmodel.train_target(feats, t, self.cfg.train_config(seed), self.ref_feats).params
                self.cache.put(key, p)
            out[t] = p
        self._tick("train", t0)
        return out

    def train_songs(self, songs: list[StemSet], seed: int) -> dict[str, sepmodel.ModelParams]:
        """Train on songs outside the corpus (oracle rows)."""
        t0 = time.perf_counter()
        feats = sepmodel.corpus_features(songs)
        out = {t: sepmodel.train_target(feats, t, self.cfg.train_config(seed), self.ref_feats).params
               for t in TARGETS}
        self._tick("train", t0)
        return out

    def evaluate(self, params) -> dict[str, float]:
        t0 = time.perf_counter()
        out = sepmodel.sdr_summary(sepmodel.evaluate_sdr(params, self.eval_set))
        self._tick("eval", t0)
        return out

    def attribution(self, baseline) -> attribution.AttributionMatrix:
        t0 = time.perf_counter()
        feats = [self.feats[i] for i in self.ids]
        fishers = {t: attribution.fisher_diagonal(baseline[t], feats, t) for t in TARGETS}
        a = attribution.attribution_matrix(baseline, fishers, feats, self.ref_feats, self.cfg.unlearn)
        self._tick("attribute", t0)
        return a

    def fad_scores(self) -> np.ndarray:
        if self._fad is None:
            t0 = time.perf_counter()
            self._fad = np.array([s.score for s in fadfilter.fad_scores(self.corpus, self.refs)])
            self._tick("fad", t0)
        return self._fad

    def cls_scores(self, seed: int) -> np.ndarray:
        t0 = time.perf_counter()
        c = clsbaseline.train_classifier(self.refs, seed, epochs=self.cfg.cls_epochs)
        scores = clsbaseline.song_scores(c, self.corpus)
        self._tick("cls", t0)
        return scores

    def scores(self, method: str, seed: int, baseline) -> dict[str, np.ndarray] | np.ndarray:
        """Unified score vector, or a per-target dict for ``unlearn_per_target``."""
        if method in ("unlearn_unified", "unlearn_per_target"):
            if seed not in self._attr:
                self._attr[seed] = self.attribution(baseline)
            a = self._attr[seed]
            if method == "unlearn_unified":
                return attribution.aggregate_unified(a)
            return {t: attribution.aggregate_per_target(a, t) for t in TARGETS}
        if method == "fad":
            return self.fad_scores()
        if method == "cls":
            return self.cls_scores(seed)
        raise ConfigError(f"unknown method {method!r}")

    def retained_sets(self, method: str, scores, ratio: float) -> dict[str, list[str]]:
        higher = method != "fad"
        if isinstance(scores, dict):
            return {t: attribution.filter_ranked(scores[t], self.ids, ratio, higher) for t in TARGETS}
        kept = attribution.filter_ranked(scores, self.ids, ratio, higher)
        return {t: kept for t in TARGETS}


def _row(method, ratio, seed, retained, ledger, sdr=None, status="ok", diagnostic=""):
    per_target = {t: clean_fraction(retained[t], ledger) for t in TARGETS} if retained else {}
    unified = len({tuple(v) for v in retained.values()}) == 1 if retained else True
    row = {"method": method, "ratio": ratio, "seed": seed,
           "n_retained": len(next(iter(retained.values()))) if retained else 0,
           "clean_fraction": float(np.mean(list(per_target.values()))) if per_target else None,
           "status": status, "diagnostic": diagnostic}
    if not unified:
        row["clean_fraction_per_target"] = per_target
    if sdr is not None:
        row["sdr"] = sdr
    return row


def run_pipeline(cfg: PipelineConfig, corpus=None, refs=None, eval_set=None, ledger=None,
                 experiment: Experiment | None = None) -> CleaningReport:
    """Run every (seed, method, ratio) cell; failures are recorded per cell."""
    exp = experiment or Experiment(cfg, corpus, refs, eval_set, ledger)
    report = CleaningReport(config=cfg.to_dict())
    everyone = {t: exp.ids for t in TARGETS}
    for seed in cfg.seeds:
        try:
            baseline = exp.train_on(everyone, seed)
            base_sdr = exp.evaluate(baseline) if cfg.retrain else None
        except (sepmodel.TrainingDiverged, ValueError, FloatingPointError) as exc:
            report.rows.append(_row("none", 1.0, seed, everyone, exp.ledger, status="failed",
                                    diagnostic=f"baseline: {exc}"))
            continue
        report.rows.append(_row("none", 1.0, seed, everyone, exp.ledger, base_sdr))

        for oracle in cfg.oracles:
            if oracle == "oracle_clean":
                ids = [i for i in exp.ids if exp.ledger[i] == CLEAN]
                params = exp.train_on({t: ids for t in TARGETS}, seed)
                report.rows.append(_row(oracle, 1.0, seed, {t: ids for t in TARGETS}, exp.ledger,
                                        exp.evaluate(params)))
            else:
                params = exp.train_songs(exp.refs, seed)
                row = _row(oracle, 1.0, seed, {}, exp.ledger, exp.evaluate(params))
                row["clean_fraction"] = 1.0
                report.rows.append(row)

        for method in cfg.methods:
            if method == "none":
                continue
            try:
                scores = exp.scores(method, seed, baseline)
            except Exception as exc:  # scoring failure voids every ratio of this method
                for ratio in cfg.ratios_for(method):
                    report.rows.append(_row(method, ratio, seed, {}, exp.ledger, status="failed",
                                            diagnostic=f"scoring: {type(exc).__name__}: {exc}"))
                continue
            report.retained.setdefault(method, {}).setdefault(str(seed), {})["scores"] = (
                {t: [float(v) for v in s] for t, s in scores.items()} if isinstance(scores, dict)
                else [float(v) for v in scores])
            for ratio in cfg.ratios_for(method):
                kept = exp.retained_sets(method, scores, ratio)
                report.retained[method][str(seed)][f"{ratio:g}"] = (
                    kept if method == "unlearn_per_target" else kept[TARGETS[0]])
                try:
                    sdr = exp.evaluate(exp.train_on(kept, seed)) if cfg.retrain else None
                    report.rows.append(_row(method, ratio, seed, kept, exp.ledger, sdr))
                except (sepmodel.TrainingDiverged, ValueError, FloatingPointError) as exc:
                    report.rows.append(_row(method, ratio, seed, kept, exp.ledger, status="failed",
                                            diagnostic=f"{type(exc).__name__}: {exc}"))
    report.timings = dict(exp.timings)
    if cfg.out_dir:
        write_report(report, cfg.out_dir)
    return report


def write_report(report: CleaningReport, out_dir):
    out = Path(out_dir)
    storage.atomic_write(out / "report.json", report.to_json())
    storage.atomic_write(out / "report.txt", report.to_text())
    storage.atomic_write(out / "retained.json", report.retained_json())
    storage.atomic_write(out / "timings.json", storage.dump_json(report.timings))


def read_report(out_dir) -> CleaningReport:
    d = json.loads((Path(out_dir) / "report.json").read_text())
    return CleaningReport(config=d["config"], rows=d["rows"])
