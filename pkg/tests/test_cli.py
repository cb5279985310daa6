import json

import pytest

from travag.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from travag.eventlog import parse_variant_table
from travag.pipeline import audit_ledger

EVENTS = (
    "case:concept:name,concept:name,time:timestamp\n"
    + "".join(f"c{i},register,1\nc{i},visit,2\nc{i},release,3\n" for i in range(9))
    + "c9,register,1\nc9,surgery,2\nc9,release,3\n"
)

FAST = {
    "autoencoder": {"iterations": 50, "encoder_hidden": [8], "decoder_hidden": [8]},
    "gan": {"iterations": 50, "generator_hidden": [8], "discriminator_hidden": [8]},
}


@pytest.fixture
def events(tmp_path):
    path = tmp_path / "events.csv"
    path.write_text(EVENTS)
    return path


@pytest.fixture
def config(tmp_path, events):
    def make(**extra):
        doc = {
            **FAST,
            "io": {
                "input": str(events),
                "output": str(tmp_path / "synthetic.tsv"),
                "bundle": str(tmp_path / "bundle"),
                "ledger": str(tmp_path / "ledger.json"),
            },
            **extra,
        }
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return path

    return make


def lines(text):
    return dict(line.split("\t", 1) for line in text.strip().splitlines())


def test_convert_prints_statistics(events, tmp_path, capsys):
    out = tmp_path / "variants.tsv"
    assert main(["convert", str(events), str(out)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "30 events, 10 cases, 4 activities, 2 variants, 20%"
    assert parse_variant_table(out).num_cases == 10


def test_convert_errors(tmp_path, capsys):
    assert main(["convert", str(tmp_path / "nope.csv"), str(tmp_path / "o.tsv")]) == EXIT_USAGE
    bad = tmp_path / "bad.csv"
    bad.write_text("case:concept:name,concept:name,time:timestamp\n1,a,never\n")
    assert main(["convert", str(bad), str(tmp_path / "o.tsv")]) == EXIT_FAILURE
    assert "bad.csv:2" in capsys.readouterr().err
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["convert", str(empty), str(tmp_path / "o.tsv")]) == EXIT_FAILURE
    assert capsys.readouterr().err


def test_run_then_generate(config, tmp_path, capsys):
    path = config(privacy={"epsilon": 20.0, "delta": 1e-5})
    assert main(["run", "--config", str(path), "--seed", "1", "--calibrate"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("guarantee: epsilon=")
    synthetic = parse_variant_table(tmp_path / "synthetic.tsv")
    assert synthetic.num_cases == 10
    ledger = json.loads((tmp_path / "ledger.json").read_text())
    assert ledger["combined"]["epsilon"] <= 20.0 and audit_ledger(ledger)

    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for target in (a, b):
        assert main(["generate", str(tmp_path / "bundle"), str(target), "--count", "25", "--seed", "4"]) == EXIT_OK
    assert a.read_text() == b.read_text() and parse_variant_table(a).num_cases == 25


def test_random_seed_is_printed(config, capsys):
    assert main(["run", "--config", str(config())]) == EXIT_OK
    err = capsys.readouterr().err
    assert err.startswith("seed: ") and int(err.split()[1]) >= 0


def test_config_seed_is_used_silently(config, capsys):
    assert main(["run", "--config", str(config(seed=5))]) == EXIT_OK
    assert "seed:" not in capsys.readouterr().err


def test_run_usage_errors(config, tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    bad = config(autoencoder={"sampling_rate": 2})
    assert main(["run", "--config", str(bad)]) == EXIT_USAGE
    assert "autoencoder.sampling_rate" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == EXIT_USAGE


def test_run_refuses_infeasible_target(config, capsys):
    path = config(privacy={"epsilon": 1e-4, "delta": 1e-5, "calibrate": True})
    assert main(["run", "--config", str(path), "--seed", "0"]) == EXIT_FAILURE
    assert "unreachable" in capsys.readouterr().err


def test_generate_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["generate", str(tmp_path), str(tmp_path / "o.tsv"), "--count", "0"])
    assert exc.value.code == EXIT_USAGE
    assert main(["generate", str(tmp_path / "none"), str(tmp_path / "o.tsv"), "--seed", "1"]) == EXIT_USAGE
    # an existing but empty directory is a corrupt bundle
    assert main(["generate", str(tmp_path), str(tmp_path / "o.tsv"), "--seed", "1"]) == EXIT_FAILURE


def test_evaluate(events, tmp_path, capsys):
    syn = tmp_path / "syn.tsv"
    syn.write_text("variant\tfrequency\nregister,visit,release\t10\n")
    assert main(["evaluate", "--original", str(events), "--synthetic", str(syn)]) == EXIT_OK
    got = lines(capsys.readouterr().out)
    assert got["relative_log_similarity"] == "0.966667"
    assert got["earth_movers_distance"] == "0.033333"
    assert got["absolute_log_difference"] == "1"
    assert (got["original_cases"], got["synthetic_cases"]) == ("10", "10")
    assert (got["original_variants"], got["synthetic_variants"]) == ("2", "1")


def test_account_and_calibrate(capsys):
    assert main(["account", "--q", "1", "--phi", "1", "--iterations", "1", "--delta", "1e-5"]) == EXIT_OK
    out = capsys.readouterr().out
    got = lines(out)
    assert got["epsilon"] == "5.302585" and got["alpha_star"] == "6"
    assert got["alpha"] == "rdp_epsilon\tdp_epsilon" and got["6"] == "3\t5.30259"

    args = ["calibrate", "--target-eps", "1", "--delta", "1e-5", "--q", "0.01", "--iterations", "1000"]
    assert main(args) == EXIT_OK
    got = lines(capsys.readouterr().out)
    assert float(got["epsilon"]) <= 1.0

    args = ["calibrate", "--epsilon", "1e-4", "--delta", "1e-5", "--q", "1", "--iterations", "1000"]
    assert main(args) == EXIT_FAILURE
    with pytest.raises(SystemExit) as exc:
        main(["account", "--q", "2", "--phi", "1", "--iterations", "1", "--delta", "1e-5"])
    assert exc.value.code == EXIT_USAGE


def test_gridsearch(config, capsys):
    path = config(
        privacy={"epsilon": 50.0, "delta": 1e-5},
        gridsearch={"sampling_rates": [0.5], "iterations": [30], "noise_multipliers": [0.1, 2.0], "trials": 1},
        seed=2,
    )
    assert main(["gridsearch", "--config", str(path)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("q\tT\tphi") and len(out) == 4
    assert out[1].split("\t")[4] == "False" and out[2].split("\t")[4] == "True"
    assert out[-1].startswith("best: q=0.5 T=30 phi=2.0")
