import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from synth import (
    PHONES,
    phoneme_corpus,
    sawtooth,
    vowel,
    window_dataset,
    write_jsonl,
    write_phone_inventory,
)

from layerprobe.cli import main
from layerprobe.config import ConfigError, config_from_dict, load_config, resolve_output_dir, with_overrides
from layerprobe.corpus_io import ReprTensor, UtteranceManifest, write_manifest, write_repr_tensor
from layerprobe.dsp.wav import write_wav
from layerprobe.probe import read_probe


def run(args, env=None):
    result = CliRunner().invoke(main, args, env=env, catch_exceptions=False)
    return result


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    inv = write_phone_inventory(root / "phones.txt")
    a = phoneme_corpus(root / "alpha", "alpha", n_utts=8, peak=7, seed=1)
    b = phoneme_corpus(root / "beta", "beta", n_utts=8, peak=4, seed=2)
    return root, inv, a, b


def cca_config(tmp_path, corpora, extra=""):
    root, inv, a, b = corpora
    text = f"""
seed = 0
output_dir = "out"

[inventory]
path = "{inv}"
expected_size = {len(PHONES)}

[cca_phoneme]
per_phone_cap = 600

[[cca_phoneme.corpus]]
name = "alpha"
manifest = "{a[0]}"
alignments = "{a[1]}"

[[cca_phoneme.corpus]]
name = "beta"
manifest = "{b[0]}"
alignments = "{b[1]}"
{extra}
"""
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_cca_phoneme_outputs(tmp_path, corpora):
    cfg = cca_config(tmp_path, corpora)
    res = run(["cca-phoneme", "-c", str(cfg)])
    assert res.exit_code == 0, res.output
    out = tmp_path / "out"
    table = rows(out / "cca_phoneme.csv")
    assert len(table) == 2 * 12
    alpha = [float(r["score"]) for r in table if r["corpus"] == "alpha"]
    beta = [float(r["score"]) for r in table if r["corpus"] == "beta"]
    assert int(np.argmax(alpha)) == 7
    # the synthetic profile is broad, so neighbouring layers can saturate together
    assert abs(int(np.argmax(beta)) - 4) <= 1
    assert beta[4] > beta[10] and alpha[7] > alpha[1]
    doc = json.loads((out / "cca_phoneme.json").read_text())
    assert doc["config"]["seed"] == 0 and doc["config"]["cca"]["n_folds"] == 10
    assert len(doc["results"]) == 24
    svg = (out / "cca_phoneme.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


def test_cca_phoneme_rerun_and_jobs_are_byte_identical(tmp_path, corpora):
    cfg = cca_config(tmp_path, corpora)
    outs = []
    for i, jobs in enumerate(("1", "8", "8")):
        d = tmp_path / f"o{i}"
        assert run(["cca-phoneme", "-c", str(cfg), "--out", str(d), "--jobs", jobs]).exit_code == 0
        outs.append({f: (d / f).read_bytes() for f in ("cca_phoneme.csv", "cca_phoneme.json", "cca_phoneme.svg")})
    assert outs[0] == outs[1] == outs[2]


def test_seed_flag_overrides_file(tmp_path, corpora):
    cfg = cca_config(tmp_path, corpora)
    run(["cca-phoneme", "-c", str(cfg), "--out", str(tmp_path / "s0")])
    run(["cca-phoneme", "-c", str(cfg), "--out", str(tmp_path / "s5"), "--seed", "5"])
    j0 = json.loads((tmp_path / "s0/cca_phoneme.json").read_text())
    j5 = json.loads((tmp_path / "s5/cca_phoneme.json").read_text())
    assert j0["config"]["seed"] == 0 and j5["config"]["seed"] == 5
    assert j5["config"]["cca"]["seed"] == 5
    assert j0["results"] != j5["results"]


def test_output_dir_precedence(tmp_path, corpora, monkeypatch):
    cfg = cca_config(tmp_path, corpora)
    env_dir = tmp_path / "from_env"
    assert run(["cca-phoneme", "-c", str(cfg)], env={"LAYERPROBE_OUT": str(env_dir)}).exit_code == 0
    assert (env_dir / "cca_phoneme.csv").exists()
    flag_dir = tmp_path / "from_flag"
    run(["cca-phoneme", "-c", str(cfg), "-o", str(flag_dir)], env={"LAYERPROBE_OUT": str(env_dir)})
    assert (flag_dir / "cca_phoneme.csv").exists()
    loaded = load_config(cfg)
    monkeypatch.delenv("LAYERPROBE_OUT", raising=False)
    assert resolve_output_dir(loaded) == tmp_path / "out"


def test_unknown_config_key_is_a_config_error(tmp_path, corpora):
    cfg = cca_config(tmp_path, corpora, extra="\n[cca]\nreg_epsilon = 1e-6\nbogus = 1\n")
    res = run(["cca-phoneme", "-c", str(cfg)])
    assert res.exit_code == 2
    assert "bogus" in res.output


@pytest.mark.parametrize("text", ["seed = 'x'\n", "[cca]\nn_folds = 1\n", "jobs = 0\n", "nonsense = [\n", "[pool]\n"])
def test_bad_configs(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_config_file(tmp_path):
    assert run(["score", "-c", str(tmp_path / "nope.toml")]).exit_code == 2


def test_missing_section(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 1\n")
    assert run(["score", "-c", str(p)]).exit_code == 2


def test_missing_inputs_are_listed_together(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("""
[cca_phoneme]
[[cca_phoneme.corpus]]
name = "x"
manifest = "gone/m.jsonl"
alignments = "gone/a.tsv"
""")
    res = run(["cca-phoneme", "-c", str(p), "-o", str(tmp_path / "o")])
    assert res.exit_code == 3
    assert "m.jsonl" in res.output and "a.tsv" in res.output
    assert not (tmp_path / "o").exists()


def test_numerical_failure_exit_code(tmp_path):
    # constant activations give a zero-variance representation view
    d = tmp_path / "flat"
    d.mkdir()
    man, ali = [], []
    for u in range(4):
        write_repr_tensor(d / f"u{u}.lrep", ReprTensor(np.ones((2, 100, 3))))
        man.append(UtteranceManifest(f"u{u}", "g", 2.0, repr_path=f"u{u}.lrep"))
        ali += [f"u{u}\t{PHONES[k % 3]}\t{k * 0.1:.1f}\t{(k + 1) * 0.1:.1f}\n" for k in range(18)]
    write_manifest(d / "m.jsonl", man)
    (d / "a.tsv").write_text("".join(ali))
    p = tmp_path / "c.toml"
    p.write_text(f"""
[cca_phoneme]
[[cca_phoneme.corpus]]
name = "flat"
manifest = "{d / 'm.jsonl'}"
alignments = "{d / 'a.tsv'}"
""")
    assert run(["cca-phoneme", "-c", str(p), "-o", str(tmp_path / "o")]).exit_code == 4


def probe_config(tmp_path, data, extra=""):
    p = tmp_path / "probe.toml"
    p.write_text(f"""
seed = 0
[probe]
dev_groups = ["fam2"]
test_groups = ["fam3"]
lr = 0.5
epochs = 6
batch = 16
hidden = 16
{extra}

[[probe.task]]
name = "vc"
dataset = "{data}"
classes = ["cry", "fuss", "babble"]
""")
    return p


@pytest.fixture(scope="module")
def window_data(tmp_path_factory):
    return window_dataset(tmp_path_factory.mktemp("win") / "ds", n_per_class_group=40, separation=4.0)


def test_probe_outputs(tmp_path, window_data):
    cfg = probe_config(tmp_path, window_data)
    out = tmp_path / "p"
    res = run(["probe", "-c", str(cfg), "-o", str(out)])
    assert res.exit_code == 0, res.output
    weights = [float(r["weight"]) for r in rows(out / "layer_weights.csv")]
    assert len(weights) == 12
    assert sum(weights) == pytest.approx(1.0, abs=1e-6)
    assert int(np.argmax(weights)) == 7
    m = json.loads((out / "probe_metrics.json").read_text())
    assert set(m["dev"]["vc"]) == {"accuracy", "macro_f1"}
    assert "vc" in m["test"]
    assert 1 <= m["best_epoch"] <= 6
    assert read_probe(out / "probe.lprb").n_layers == 12
    assert (out / "probe_weights.svg").read_text().count("<rect") == 13


def test_probe_layer_mask_and_best_k(tmp_path, window_data):
    cfg = probe_config(tmp_path, window_data, extra="layers = [5, 6, 7]")
    out = tmp_path / "masked"
    assert run(["probe", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    weights = [float(r["weight"]) for r in rows(out / "layer_weights.csv")]
    assert all(w == 0.0 for i, w in enumerate(weights) if i not in (5, 6, 7))
    assert sum(weights) == pytest.approx(1.0)

    full = tmp_path / "full"
    run(["probe", "-c", str(probe_config(tmp_path, window_data)), "-o", str(full)])
    cfg = probe_config(tmp_path, window_data, extra=f'best_k_from = "{full / "layer_weights.csv"}"')
    out = tmp_path / "best3"
    assert run(["probe", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    m = json.loads((out / "probe_metrics.json").read_text())
    assert len(m["layers"]) == 3 and 7 in m["layers"]


def test_probe_rejects_single_class(tmp_path):
    data = window_dataset(tmp_path / "one", classes=("cry", "fuss", "babble"), n_per_class_group=5)
    rows_path = data / "rows.jsonl"
    recs = [json.loads(l) for l in rows_path.read_text().splitlines()]
    for r in recs:
        r["label"] = "cry"
    rows_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in recs))
    res = run(["probe", "-c", str(probe_config(tmp_path, data)), "-o", str(tmp_path / "o")])
    assert res.exit_code == 3
    assert "fewer than two classes" in res.output


def score_config(tmp_path, ref, a, b=None, mode="segment"):
    p = tmp_path / "score.toml"
    hyp_b = f'hyp_b = "{b}"\nname_b = "B"' if b else ""
    p.write_text(f"""
[score]
reference = "{ref}"
hyp_a = "{a}"
name_a = "A"
mode = "{mode}"
{hyp_b}
""")
    return p


def _transcripts(tmp_path, n=40, err_a=0.3, err_b=0.05, seed=0):
    rng = np.random.default_rng(seed)
    ref, a, b = [], [], []
    for i in range(n):
        phones = [PHONES[k] for k in rng.integers(0, 6, 10)]
        ref.append({"utterance_id": f"u{i}", "phones": phones})
        a.append({"utterance_id": f"u{i}", "phones": [p if rng.random() > err_a else "t" for p in phones]})
        b.append({"utterance_id": f"u{i}", "phones": [p if rng.random() > err_b else "k" for p in phones]})
    return (write_jsonl(tmp_path / "ref.jsonl", ref), write_jsonl(tmp_path / "a.jsonl", a),
            write_jsonl(tmp_path / "b.jsonl", b))


def test_score_two_systems(tmp_path):
    ref, a, b = _transcripts(tmp_path)
    out = tmp_path / "s"
    assert run(["score", "-c", str(score_config(tmp_path, ref, a, b)), "-o", str(out)]).exit_code == 0
    per = {r["system"]: float(r["per"]) for r in rows(out / "per.csv")}
    assert per["A"] > per["B"]
    sig = json.loads((out / "significance.json").read_text())
    assert sig["W"] > 0 and sig["p"] < 0.001 and sig["stars"] == "***"
    assert sig["systems"] == ["A", "B"]
    assert sig["config"]["score"]["mode"] == "segment"
    assert "***" in (out / "score.md").read_text()


def test_score_identical_systems(tmp_path):
    ref, a, _ = _transcripts(tmp_path)
    out = tmp_path / "s"
    run(["score", "-c", str(score_config(tmp_path, ref, a, a)), "-o", str(out)])
    sig = json.loads((out / "significance.json").read_text())
    assert (sig["W"], sig["p"], sig["stars"]) == (0.0, 1.0, "")


def test_score_single_system_and_utterance_mode(tmp_path):
    ref, a, b = _transcripts(tmp_path)
    out = tmp_path / "one"
    assert run(["score", "-c", str(score_config(tmp_path, ref, a)), "-o", str(out)]).exit_code == 0
    assert not (out / "significance.json").exists()
    out = tmp_path / "utt"
    run(["score", "-c", str(score_config(tmp_path, ref, a, b, mode="utterance")), "-o", str(out)])
    assert json.loads((out / "significance.json").read_text())["n_segments"] == 40


def test_score_mismatched_ids(tmp_path):
    ref, a, b = _transcripts(tmp_path)
    lines = b.read_text().splitlines()[:-1]
    b.write_text("\n".join(lines) + "\n")
    res = run(["score", "-c", str(score_config(tmp_path, ref, a, b)), "-o", str(tmp_path / "o")])
    assert res.exit_code == 3 and "u39" in res.output


def test_ingest_maps_sampa(tmp_path):
    d = tmp_path / "raw"
    d.mkdir()
    write_wav(d / "u1.wav", np.zeros(16000))
    write_manifest(d / "m.jsonl", [UtteranceManifest("u1", "fam", 1.0, audio_path="u1.wav")])
    (d / "a.tsv").write_text("u1\ttS\t0.0\t0.2\nu1\t{\t0.2\t0.5\n")
    write_jsonl(d / "l.jsonl", [{"utterance_id": "u1", "task_id": "vc", "label": "cry"}])
    (tmp_path / "inv.txt").write_text("tʃ\næ\n")
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"""
[inventory]
path = "inv.txt"
[ingest]
manifest = "raw/m.jsonl"
alignments = "raw/a.tsv"
sampa_table = "{Path(__file__).parents[1] / 'src/layerprobe/data/sampa_ipa.tsv'}"
labels = "raw/l.jsonl"
""")
    out = tmp_path / "o"
    assert run(["ingest", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    assert (out / "alignments.tsv").read_text().split("\n")[0].split("\t")[1] == "tʃ"
    summary = json.loads((out / "ingest_summary.json").read_text())["summary"]
    assert summary["phone_counts"] == {"tʃ": 1, "æ": 1}
    assert summary["label_counts"] == {"vc": {"cry": 1}}

    (d / "a.tsv").write_text("u1\tQQ\t0.0\t0.2\n")
    res = run(["ingest", "-c", str(cfg), "-o", str(tmp_path / "o2")])
    assert res.exit_code == 3 and "QQ" in res.output


def test_pool_phoneme_mode(tmp_path, corpora):
    _, inv, (man, ali), _ = corpora
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"""
[inventory]
path = "{inv}"
[pool]
manifest = "{man}"
alignments = "{ali}"
per_phone_cap = 10
name = "phon"
""")
    out = tmp_path / "o"
    assert run(["pool", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    recs = [json.loads(l) for l in (out / "phon/rows.jsonl").read_text().splitlines()]
    assert len(recs) == 10 * len(PHONES)
    assert len(list((out / "phon").glob("layer_*.lrep"))) == 12


def build_audio_corpus(root, voiced=True):
    """Recordings whose label tracks switch between three pitch regimes; dumps track the pitch."""
    f0s = {"cry": 400.0, "fuss": 250.0, "babble": 150.0}
    vowels = {"cry": ((900, 90), (1500, 100), (2900, 120)), "fuss": ((700, 80), (1200, 90), (2600, 120)),
              "babble": ((400, 70), (2000, 100), (2700, 120))}
    rng = np.random.default_rng(0)
    manifest, tracks = [], []
    for u in range(3):
        labels = ["cry", "fuss", "babble", "fuss", "cry", "babble"]
        rng.shuffle(labels)
        if voiced:
            parts = [vowel(f0s[lab], vowels[lab], 1.0, seed=u * 10 + i) for i, lab in enumerate(labels)]
        else:
            parts = [sawtooth(f0s[lab], 1.0, amp=0.1) for lab in labels]
        audio = np.concatenate(parts)
        write_wav(root / f"r{u}.wav", audio)
        n_frames = int((len(labels) - 0.0125) / 0.02) + 1
        centers = np.arange(n_frames) * 0.02 + 0.0125
        seg_f0 = np.array([f0s[labels[min(int(c), len(labels) - 1)]] for c in centers])
        vals = rng.normal(size=(4, n_frames, 3))
        vals[2, :, 0] += seg_f0 / 100.0
        write_repr_tensor(root / f"r{u}.lrep", ReprTensor(vals))
        manifest.append(UtteranceManifest(f"r{u}", f"fam{u}", float(len(labels)),
                                          audio_path=f"r{u}.wav", repr_path=f"r{u}.lrep"))
        tracks += [f"r{u}\t{i}\t{i + 1}\t{lab}\n" for i, lab in enumerate(labels)]
    write_manifest(root / "m.jsonl", manifest)
    (root / "tracks.tsv").write_text("".join(tracks))
    return root


@pytest.fixture(scope="module")
def audio_corpus(tmp_path_factory):
    return build_audio_corpus(tmp_path_factory.mktemp("audio"))


def paraling_config(tmp_path, corpus):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"""
seed = 3
[pool]
mode = "window"
manifest = "{corpus / 'm.jsonl'}"
tracks = "{corpus / 'tracks.tsv'}"
win_s = 0.5
hop_s = 0.25
core_s = 0.25
name = "win"

[cca_paraling]
dataset = "{tmp_path / 'o' / 'win'}"
per_class = 12
""")
    return cfg


def test_pool_window_then_cca_paraling(tmp_path, audio_corpus):
    cfg = paraling_config(tmp_path, audio_corpus)
    out = tmp_path / "o"
    assert run(["pool", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    recs = [json.loads(l) for l in (out / "win/rows.jsonl").read_text().splitlines()]
    assert {r["label"] for r in recs} == {"cry", "fuss", "babble"}
    assert all(r["audio_path"].endswith(".wav") for r in recs)

    res = run(["cca-paraling", "-c", str(cfg), "-o", str(out), "-j", "4"])
    assert res.exit_code == 0, res.output
    table = rows(out / "cca_paraling.csv")
    assert len(table) == 6 * 4
    pitch = {int(r["layer"]): float(r["score"]) for r in table if r["group"] == "pitch"}
    assert max(pitch, key=pitch.get) == 2
    assert json.loads((out / "cca_paraling.json").read_text())["skipped_groups"] == []
    first = (out / "cca_paraling.csv").read_bytes()
    run(["cca-paraling", "-c", str(cfg), "-o", str(out), "-j", "1"])
    assert (out / "cca_paraling.csv").read_bytes() == first


def test_cca_paraling_skips_constant_group(tmp_path):
    # plain sawtooths have no resonances, so every formant descriptor takes its fallback value
    cfg = paraling_config(tmp_path, build_audio_corpus(tmp_path / "saw", voiced=False))
    out = tmp_path / "o"
    assert run(["pool", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    assert run(["cca-paraling", "-c", str(cfg), "-o", str(out)]).exit_code == 0
    doc = json.loads((out / "cca_paraling.json").read_text())
    assert doc["skipped_groups"] == ["formant"]
    assert {r["group"] for r in rows(out / "cca_paraling.csv")} == {
        "energy", "mfcc", "pitch", "spectral", "voice_quality"}


def test_cca_paraling_insufficient_class(tmp_path, window_data):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[cca_paraling]\ndataset = "{window_data}"\nper_class = 100000\n')
    res = run(["cca-paraling", "-c", str(cfg), "-o", str(tmp_path / "o")])
    assert res.exit_code == 3 and "fewer than" in res.output


def test_report_collects_results(tmp_path, corpora, window_data):
    out = tmp_path / "all"
    run(["cca-phoneme", "-c", str(cca_config(tmp_path, corpora)), "-o", str(out)])
    run(["probe", "-c", str(probe_config(tmp_path, window_data)), "-o", str(out)])
    (out / "cca_phoneme.svg").unlink()
    res = run(["report", "-c", str(cca_config(tmp_path, corpora)), "-o", str(out)])
    assert res.exit_code == 0
    assert (out / "cca_phoneme.svg").exists()
    report = (out / "report.md").read_text()
    assert "| alpha | 7 |" in report
    assert "probe_weights.svg" in report


def test_report_without_results(tmp_path):
    (tmp_path / "empty").mkdir()
    p = tmp_path / "c.toml"
    p.write_text("seed = 0\n")
    assert run(["report", "-c", str(p), "-o", str(tmp_path / "empty")]).exit_code == 3


def test_config_overrides():
    cfg = config_from_dict({"seed": 2, "cca": {"reg_epsilon": 1e-5}})
    assert cfg.cca.seed == 2 and cfg.cca.reg_epsilon == 1e-5
    new = with_overrides(cfg, seed=9, jobs=3)
    assert (new.seed, new.cca.seed, new.jobs, new.cca.reg_epsilon) == (9, 9, 3, 1e-5)
    assert new.echo("cca") == {"seed": 9, "cca": new.cca.to_dict()}


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "layerprobe.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("ingest", "pool", "cca-phoneme", "cca-paraling", "probe", "score", "report"):
        assert cmd in res.stdout


def test_score_constant_difference_writes_infinite_w(tmp_path):
    # A makes exactly one substitution per utterance and B none: every segment differs by 1
    ref = [{"utterance_id": f"u{i}", "phones": ["a", "i", "u", "p"]} for i in range(10)]
    hyp_a = [{"utterance_id": r["utterance_id"], "phones": ["t"] + r["phones"][1:]} for r in ref]
    files = [write_jsonl(tmp_path / f"{n}.jsonl", recs) for n, recs in (("r", ref), ("a", hyp_a), ("b", ref))]
    out = tmp_path / "s"
    assert run(["score", "-c", str(score_config(tmp_path, *files)), "-o", str(out)]).exit_code == 0
    sig = json.loads((out / "significance.json").read_text())
    assert (sig["W"], sig["p"], sig["stars"]) == ("inf", 0.0, "***")
