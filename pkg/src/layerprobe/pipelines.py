"""Command implementations behind the CLI.

Each ``run_*`` function takes a :class:`RunConfig` and an output directory,
checks that every input exists before doing any work, and writes its
results with deterministic formatting. Parallel work is mapped in order so
``jobs`` never changes output bytes.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cca import layerwise_cca_sweep
from .config import RunConfig
from .corpus_io import (
    AlignmentEntry,
    CorpusError,
    PhoneInventory,
    UnknownPhoneError,
    group_alignments,
    map_sampa_to_ipa,
    read_alignments,
    read_inventory,
    read_label_tracks,
    read_labels,
    read_manifest,
    read_mapping_table,
    read_repr_tensor,
    write_alignments,
    write_labels,
    write_manifest,
)
from .ctc_eval import ScoringError, levenshtein_align, mapsswe_test, read_transcripts, significance_stars
from .dsp.lld import GROUP_NAMES, extract_feature_groups
from .dsp.wav import read_wav
from .pooling import (
    EmptySpanError,
    build_phoneme_dataset,
    load_pooled_dataset,
    pool_utterance_phonemes,
    save_pooled_dataset,
    utterance_mean_pool,
    window_label_track,
)
from .probe import (
    NewBob,
    TrainConfig,
    evaluate,
    extract_layer_weights,
    select_best_k_layers,
    train_probe,
    write_probe,
)
from .report import bar_chart_svg, json_text, line_chart_svg, read_csv, write_csv, write_json, write_text

log = logging.getLogger(__name__)


class InputError(Exception):
    """Inputs are missing or unusable; raised before any computation starts where possible."""


def require_files(paths: Iterable[str | os.PathLike | None]) -> None:
    missing = sorted({str(p) for p in paths if p is not None and not os.path.exists(p)})
    if missing:
        raise InputError("missing inputs:\n  " + "\n  ".join(missing))


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _inventory(cfg: RunConfig) -> PhoneInventory | None:
    if cfg.inventory is None:
        return None
    require_files([cfg.inventory.path])
    return read_inventory(cfg.inventory.path, cfg.inventory.expected_size)


def _manifest_inputs(manifest_path) -> list[str]:
    """Every audio/repr file a manifest points at."""
    out = []
    for m in read_manifest(manifest_path):
        out.extend(p for p in (m.audio_path, m.repr_path) if p is not None)
    return out


# --------------------------------------------------------------------------
# ingest


def run_ingest(cfg: RunConfig, out: Path) -> dict:
    sec = cfg.require("ingest")
    require_files([sec.manifest, sec.alignments, sec.sampa_table, sec.labels])
    inv = _inventory(cfg)
    manifest = read_manifest(sec.manifest)
    require_files(p for m in manifest for p in (m.audio_path, m.repr_path))
    by_id = {m.utterance_id: m for m in manifest}
    summary: dict = {"n_utterances": len(manifest),
                     "groups": sorted({m.group_key for m in manifest})}

    entries: list[AlignmentEntry] = []
    if sec.alignments is not None:
        raw = read_alignments(sec.alignments, None)
        if sec.sampa_table is not None:
            mapped = map_sampa_to_ipa([e.phone for e in raw], read_mapping_table(sec.sampa_table))
            raw = [AlignmentEntry(e.utterance_id, p, e.start_s, e.end_s) for e, p in zip(raw, mapped)]
        for e in raw:
            if e.utterance_id not in by_id:
                raise CorpusError(f"alignment for unknown utterance {e.utterance_id!r}")
            if inv is not None and e.phone not in inv:
                raise UnknownPhoneError(f"{e.utterance_id}: phone {e.phone!r} not in inventory")
        entries = raw
        counts: dict[str, int] = {}
        for e in entries:
            counts[e.phone] = counts.get(e.phone, 0) + 1
        summary["n_alignments"] = len(entries)
        summary["phone_counts"] = dict(sorted(counts.items()))

    labels = []
    if sec.labels is not None:
        labels = read_labels(sec.labels)
        unknown = sorted({r.utterance_id for r in labels} - set(by_id))
        if unknown:
            raise CorpusError(f"labels reference unknown utterances: {unknown}")
        per_task: dict[str, dict[str, int]] = {}
        for r in labels:
            t = per_task.setdefault(r.task_id, {})
            t[r.label] = t.get(r.label, 0) + 1
        summary["label_counts"] = {t: dict(sorted(c.items())) for t, c in sorted(per_task.items())}

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", manifest)
    if sec.alignments is not None:
        write_alignments(out / "alignments.tsv", entries)
    if sec.labels is not None:
        write_labels(out / "labels.jsonl", labels)
    write_json(out / "ingest_summary.json", {"config": cfg.echo("inventory", "ingest"), "summary": summary})
    return summary


# --------------------------------------------------------------------------
# pool


def _pool_phonemes(manifest_path, alignments_path, inv, jobs: int):
    """Central-third samples for every aligned utterance, in manifest order."""
    manifest = read_manifest(manifest_path)
    grouped = group_alignments(read_alignments(alignments_path, inv))
    unknown = sorted(set(grouped) - {m.utterance_id for m in manifest})
    if unknown:
        raise CorpusError(f"alignments reference utterances missing from the manifest: {unknown}")
    todo = [m for m in manifest if m.utterance_id in grouped]
    for m in todo:
        if m.repr_path is None:
            raise CorpusError(f"{m.utterance_id}: manifest entry has no repr_path")
    require_files(m.repr_path for m in todo)

    def work(m):
        return pool_utterance_phonemes(read_repr_tensor(m.repr_path), grouped[m.utterance_id])

    return [s for chunk in _map(work, todo, jobs) for s in chunk]


def run_pool(cfg: RunConfig, out: Path) -> dict:
    sec = cfg.require("pool")
    if sec.mode not in ("phoneme", "window"):
        raise InputError(f"pool.mode must be 'phoneme' or 'window', got {sec.mode!r}")
    need = sec.alignments if sec.mode == "phoneme" else sec.tracks
    if need is None:
        key = "alignments" if sec.mode == "phoneme" else "tracks"
        raise InputError(f"pool.mode = {sec.mode!r} needs pool.{key}")
    require_files([sec.manifest, need])
    require_files(_manifest_inputs(sec.manifest))
    target = out / sec.name

    if sec.mode == "phoneme":
        samples = _pool_phonemes(sec.manifest, sec.alignments, _inventory(cfg), cfg.jobs)
        X, _, kept = build_phoneme_dataset(samples, sec.per_phone_cap, cfg.seed, _inventory(cfg))
        rows = [{"utterance_id": samples[i].utterance_id, "phone": samples[i].phone} for i in kept]
    else:
        manifest = read_manifest(sec.manifest)
        tracks = read_label_tracks(sec.tracks)
        todo = [m for m in manifest if m.utterance_id in tracks]
        if not todo:
            raise InputError("no manifest utterance has a label track")

        def work(m):
            tensor = read_repr_tensor(m.repr_path)
            vecs, recs = [], []
            for w, label in window_label_track(tracks[m.utterance_id], m.duration_s,
                                               sec.win_s, sec.hop_s, sec.core_s):
                if label is None:
                    continue
                try:
                    vecs.append(utterance_mean_pool(tensor, (w, w + sec.win_s)))
                except EmptySpanError:
                    log.warning("%s: window at %.2f s has no frames", m.utterance_id, w)
                    continue
                recs.append({"utterance_id": m.utterance_id, "group_key": m.group_key,
                             "start_s": round(w, 9), "end_s": round(w + sec.win_s, 9),
                             "label": label, "task": sec.task, "audio_path": m.audio_path})
            return vecs, recs

        results = _map(work, todo, cfg.jobs)
        vecs = [v for vs, _ in results for v in vs]
        rows = [r for _, rs in results for r in rs]
        if not rows:
            raise InputError("no labeled windows produced")
        X = np.stack(vecs, axis=1)
    save_pooled_dataset(target, X, rows)
    summary = {"n_rows": len(rows), "n_layers": int(X.shape[0]), "dim": int(X.shape[2])}
    write_json(target / "pool_summary.json", {"config": cfg.echo("inventory", "pool"), "summary": summary})
    return summary


# --------------------------------------------------------------------------
# cca-phoneme


def run_cca_phoneme(cfg: RunConfig, out: Path) -> list[tuple[str, int, float]]:
    sec = cfg.require("cca_phoneme")
    if not sec.corpus:
        raise InputError("cca_phoneme needs at least one [[cca_phoneme.corpus]]")
    names = [c.name for c in sec.corpus]
    if len(set(names)) != len(names):
        raise InputError(f"duplicate corpus names: {names}")
    require_files([cfg.inventory.path if cfg.inventory else None]
                  + [p for c in sec.corpus for p in (c.manifest, c.alignments)])
    require_files(p for c in sec.corpus for p in _manifest_inputs(c.manifest))
    inv = _inventory(cfg)

    results = []
    for c in sec.corpus:
        samples = _pool_phonemes(c.manifest, c.alignments, inv, cfg.jobs)
        X, Y, _ = build_phoneme_dataset(samples, sec.per_phone_cap, cfg.seed, inv)
        Y = Y[:, Y.any(axis=0)]  # phones absent from this corpus carry no signal
        log.info("%s: %d phoneme samples, %d phone classes", c.name, X.shape[1], Y.shape[1])
        for layer, score in layerwise_cca_sweep(list(X), Y, cfg.cca, jobs=cfg.jobs):
            results.append((c.name, layer, score))

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "cca_phoneme.csv", ["corpus", "layer", "score"], results)
    write_json(out / "cca_phoneme.json", {
        "config": cfg.echo("inventory", "cca", "cca_phoneme"),
        "results": [{"corpus": n, "layer": l, "score": s} for n, l, s in results],
    })
    if sec.svg:
        write_text(out / "cca_phoneme.svg", _series_svg(results, "Phoneme CCA per layer"))
    return results


def _series_svg(results, title: str) -> str:
    series: dict[str, list] = {}
    for name, layer, score in results:
        series.setdefault(name, []).append((layer, score))
    return line_chart_svg(series, title=title, x_label="layer", y_label="PWCCA")


# --------------------------------------------------------------------------
# cca-paraling


def _sample_per_class(rows: list[dict], classes: Sequence[str], per_class: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    by_class = {c: [i for i, r in enumerate(rows) if r.get("label") == c] for c in classes}
    short = {c: len(v) for c, v in by_class.items() if len(v) < per_class}
    if short:
        raise InputError(f"classes with fewer than {per_class} samples: {short}")
    picked = []
    for c in classes:
        idx = by_class[c]
        picked.extend(idx[j] for j in np.sort(rng.choice(len(idx), size=per_class, replace=False)))
    return sorted(picked)


def run_cca_paraling(cfg: RunConfig, out: Path) -> list[tuple[str, int, float]]:
    sec = cfg.require("cca_paraling")
    require_files([Path(sec.dataset) / "rows.jsonl"])
    X, rows = load_pooled_dataset(sec.dataset)
    picked = _sample_per_class(rows, sec.classes, sec.per_class, cfg.seed)
    audio_paths = [rows[i].get("audio_path") for i in picked]
    if any(p is None for p in audio_paths):
        raise InputError("every sampled window needs an audio_path")
    require_files(audio_paths)

    cache: dict[str, object] = {}
    for p in sorted(set(audio_paths)):
        cache[p] = read_wav(p)

    def work(i):
        r = rows[i]
        return extract_feature_groups(cache[r["audio_path"]].slice(r["start_s"], r["end_s"]), cfg.dsp)

    feats = _map(work, picked, cfg.jobs)
    Xs = X[:, picked, :]
    results, skipped = [], []
    for g in GROUP_NAMES:
        Y = np.stack([f.group(g) for f in feats])
        # descriptors that never move in this sample carry nothing to correlate with
        sd = Y.std(axis=0)
        Y = Y[:, sd > 0]
        if Y.shape[1] == 0:
            skipped.append(g)
            log.warning("feature group %s is constant over the sample; skipped", g)
            continue
        if sec.standardize:
            Y = (Y - Y.mean(axis=0)) / sd[sd > 0]
        for layer, score in layerwise_cca_sweep(list(Xs), Y, cfg.cca, jobs=cfg.jobs):
            results.append((g, layer, score))

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "cca_paraling.csv", ["group", "layer", "score"], results)
    write_json(out / "cca_paraling.json", {
        "config": cfg.echo("cca", "dsp", "cca_paraling"),
        "n_samples": len(picked),
        "windows_without_voicing": sum(1 for f in feats if f.no_voiced_frames),
        "skipped_groups": skipped,
        "results": [{"group": g, "layer": l, "score": s} for g, l, s in results],
    })
    if sec.svg:
        write_text(out / "cca_paraling.svg", _series_svg(results, "Paralinguistic CCA per layer"))
    return results


# --------------------------------------------------------------------------
# probe


def _best_k_from_csv(path, k: int) -> list[int]:
    rows = read_csv(path)
    try:
        weights = [float(r["weight"]) for r in sorted(rows, key=lambda r: int(r["layer"]))]
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: not a layer-weight CSV ({exc})") from None
    return select_best_k_layers(weights, k)


def run_probe(cfg: RunConfig, out: Path) -> dict:
    sec = cfg.require("probe")
    if not sec.task:
        raise InputError("probe needs at least one [[probe.task]]")
    if sec.layers is not None and sec.best_k_from is not None:
        raise InputError("set at most one of probe.layers and probe.best_k_from")
    require_files([Path(t.dataset) / "rows.jsonl" for t in sec.task] + [sec.best_k_from])
    layers = sec.layers
    if sec.best_k_from is not None:
        layers = tuple(_best_k_from_csv(sec.best_k_from, sec.best_k))

    dev_g, test_g = set(sec.dev_groups), set(sec.test_groups)
    if dev_g & test_g:
        raise InputError(f"groups in both dev and test: {sorted(dev_g & test_g)}")
    train, dev, test, tasks = {}, {}, {}, {}
    for t in sec.task:
        X, rows = load_pooled_dataset(t.dataset)
        classes = list(t.classes)
        lab = [r.get("label") for r in rows]
        bad = sorted({l for l in lab if l not in classes}, key=str)
        if bad:
            raise InputError(f"task {t.name!r}: labels outside the class list: {bad}")
        y = np.array([classes.index(l) for l in lab], dtype=np.int64)
        groups = np.array([str(r.get("group_key")) for r in rows])
        missing = sorted((dev_g | test_g) - set(groups))
        if missing:
            raise InputError(f"task {t.name!r}: unknown groups {missing}")
        x = np.transpose(X, (1, 0, 2))
        is_dev, is_test = np.isin(groups, list(dev_g)), np.isin(groups, list(test_g))
        is_train = ~(is_dev | is_test)
        if np.unique(y[is_train]).size < 2:
            raise InputError(f"task {t.name!r}: training labels cover fewer than two classes")
        if not is_dev.any():
            raise InputError(f"task {t.name!r}: development split is empty")
        train[t.name] = (x[is_train], y[is_train])
        dev[t.name] = (x[is_dev], y[is_dev])
        if is_test.any():
            test[t.name] = (x[is_test], y[is_test])
        tasks[t.name] = len(classes)

    tcfg = TrainConfig(tasks=tasks, lr=sec.lr, epochs=sec.epochs, batch=sec.batch, seed=cfg.seed,
                       hidden=sec.hidden, newbob=NewBob(sec.newbob_factor, sec.newbob_threshold),
                       layers=layers)
    probe, history = train_probe(train, dev, tcfg)
    weights = extract_layer_weights(probe)
    best_epoch = max(history, key=lambda h: (h.dev_metric, -h.epoch)).epoch

    def scores(split):
        return {t: dict(zip(("accuracy", "macro_f1"), evaluate(probe, x, y, t))) for t, (x, y) in split.items()}

    metrics = {
        "config": cfg.echo("probe"),
        "layers": None if layers is None else list(layers),
        "best_epoch": best_epoch,
        "history": [{"epoch": h.epoch, "lr": h.lr, "train_loss": h.train_loss, "dev_metric": h.dev_metric}
                    for h in history],
        "dev": scores(dev),
        "test": scores(test),
        "layer_weights": [float(w) for w in weights],
    }
    out.mkdir(parents=True, exist_ok=True)
    write_probe(out / "probe.lprb", probe)
    write_json(out / "probe_metrics.json", metrics)
    write_csv(out / "layer_weights.csv", ["layer", "weight"], [(i, float(w)) for i, w in enumerate(weights)])
    if sec.svg:
        write_text(out / "probe_weights.svg", bar_chart_svg(list(weights), title="WA layer weights"))
    return metrics


# --------------------------------------------------------------------------
# score


def _encode_all(transcripts: list[dict[str, list[str]]], inv: PhoneInventory | None):
    if inv is not None:
        try:
            return [{u: inv.encode(p) for u, p in t.items()} for t in transcripts]
        except CorpusError as exc:
            raise InputError(str(exc)) from None
    symbols = sorted({s for t in transcripts for p in t.values() for s in p})
    idx = {s: i + 1 for i, s in enumerate(symbols)}
    return [{u: [idx[s] for s in p] for u, p in t.items()} for t in transcripts]


def run_score(cfg: RunConfig, out: Path) -> dict:
    sec = cfg.require("score")
    if sec.mode not in ("segment", "utterance"):
        raise InputError(f"score.mode must be 'segment' or 'utterance', got {sec.mode!r}")
    require_files([sec.reference, sec.hyp_a, sec.hyp_b])
    inv = _inventory(cfg)
    files = [read_transcripts(sec.reference), read_transcripts(sec.hyp_a)]
    names = [sec.name_a]
    if sec.hyp_b is not None:
        files.append(read_transcripts(sec.hyp_b))
        names.append(sec.name_b)
    ref_ids = set(files[0])
    for name, hyp in zip(names, files[1:]):
        if set(hyp) != ref_ids:
            only_ref = sorted(ref_ids - set(hyp))
            only_hyp = sorted(set(hyp) - ref_ids)
            raise InputError(f"system {name!r}: utterance ids differ from the reference "
                             f"(missing {only_ref}, extra {only_hyp})")
    enc = _encode_all(files, inv)
    ref = enc[0]
    utts = sorted(ref)
    ref_len = sum(len(ref[u]) for u in utts)
    if ref_len == 0:
        raise InputError("reference transcripts are empty")

    rows = []
    for name, hyp in zip(names, enc[1:]):
        s = i = d = 0
        for u in utts:
            a = levenshtein_align(ref[u], hyp[u])
            s, i, d = s + a.substitutions, i + a.insertions, d + a.deletions
        rows.append((name, 100.0 * (s + i + d) / ref_len, s, i, d, ref_len))

    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "per.csv", ["system", "per", "substitutions", "insertions", "deletions", "ref_len"], rows)
    result = {"per": {r[0]: r[1] for r in rows}}
    md = ["| system | PER (%) |", "|---|---|"]
    if sec.hyp_b is not None:
        triples = [(ref[u], enc[1][u], enc[2][u]) for u in utts]
        try:
            m = mapsswe_test(triples, sec.mode)
        except ScoringError as exc:
            raise InputError(str(exc)) from None
        stars = significance_stars(m.p)
        sig = {**m.to_json(), "stars": stars, "mode": sec.mode, "systems": names}
        write_text(out / "significance.json", _json_inf({"config": cfg.echo("score"), **sig}))
        result["significance"] = sig
        md += [f"| {rows[0][0]} | {rows[0][1]:.2f} |", f"| {rows[1][0]} | {rows[1][1]:.2f}{stars} |", "",
               f"MAPSSWE ({sec.mode}): W = {m.W:.4f}, p = {m.p:.4g}, segments = {m.n_segments}",
               "", "`*` p < 0.05, `***` p < 0.001"]
    else:
        md += [f"| {rows[0][0]} | {rows[0][1]:.2f} |"]
    write_text(out / "score.md", "\n".join(md) + "\n")
    return result


def _json_inf(obj: dict) -> str:
    """JSON text where an infinite W is written as the string "inf" / "-inf"."""
    fixed = {k: (("inf" if v > 0 else "-inf") if isinstance(v, float) and np.isinf(v) else v)
             for k, v in obj.items()}
    return json_text(fixed)


# --------------------------------------------------------------------------
# report


def run_report(cfg: RunConfig, out: Path) -> list[str]:
    """Re-render charts from whatever result tables exist in ``out`` and index them in report.md."""
    if not out.is_dir():
        raise InputError(f"output directory {out} does not exist")
    lines = ["# Results", ""]
    written = []
    for stem, key, title in (("cca_phoneme", "corpus", "Phoneme CCA per layer"),
                             ("cca_paraling", "group", "Paralinguistic CCA per layer")):
        path = out / f"{stem}.csv"
        if not path.exists():
            continue
        results = [(r[key], int(r["layer"]), float(r["score"])) for r in read_csv(path)]
        write_text(out / f"{stem}.svg", _series_svg(results, title))
        written.append(f"{stem}.svg")
        lines += [f"## {title}", "", f"![{stem}]({stem}.svg)", ""]
        by_name: dict[str, list] = {}
        for name, layer, score in results:
            by_name.setdefault(name, []).append((score, layer))
        lines += [f"| {key} | peak layer | peak score |", "|---|---|---|"]
        for name, vals in by_name.items():
            score, layer = max(vals, key=lambda v: (v[0], -v[1]))
            lines.append(f"| {name} | {layer} | {score:.4f} |")
        lines.append("")
    path = out / "layer_weights.csv"
    if path.exists():
        weights = [float(r["weight"]) for r in sorted(read_csv(path), key=lambda r: int(r["layer"]))]
        write_text(out / "probe_weights.svg", bar_chart_svg(weights, title="WA layer weights"))
        written.append("probe_weights.svg")
        lines += ["## Probe layer weights", "", "![probe_weights](probe_weights.svg)", "",
                  f"Top-3 layers: {select_best_k_layers(weights, min(3, len(weights)))}", ""]
    path = out / "score.md"
    if path.exists():
        lines += ["## Phone error rate", "", path.read_text(encoding="utf-8")]
    if len(lines) == 2:
        raise InputError(f"no result tables found in {out}")
    write_text(out / "report.md", "\n".join(lines).rstrip("\n") + "\n")
    written.append("report.md")
    return written


COMMANDS = {
    "ingest": run_ingest,
    "pool": run_pool,
    "cca-phoneme": run_cca_phoneme,
    "cca-paraling": run_cca_paraling,
    "probe": run_probe,
    "score": run_score,
    "report": run_report,
}
