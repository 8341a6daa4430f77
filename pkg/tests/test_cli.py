"""End-to-end tests of the command-line interface via click's test runner."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from stmask.cli import RunConfig, main, resolve_nu
from stmask.mixgen import load_manifest, materialize
from stmask.pipeline import load_masks
from stmask.signal_io import MultichannelWaveform, read_wav, write_wav

SMALL = [
    "--window-length", "256", "--hop", "64", "--iters", "3",
    "--warmstart", "2", "--kmeans-attempts", "2",
]
SMALL_EVAL = SMALL + ["--filter-len", "32"]


def run_cli(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def build_manifest(root, n_records=2, seed=5):
    rng = np.random.default_rng(0)
    n = 12000
    for name, start in (("a", 0), ("b", 7000)):
        x = np.zeros(n)
        x[start : start + 5000] = 0.3 * rng.standard_normal(5000)
        write_wav(root / f"{name}.wav", MultichannelWaveform(x[None], 16000))
    lines = [json.dumps({"manifest": {"seed": seed, "sample_rate": 16000}})]
    for i in range(n_records):
        lines.append(
            json.dumps(
                {
                    "name": f"mix{i:04d}",
                    "sources": [str(root / "a.wav"), str(root / "b.wav")],
                    "rir": {
                        "synthetic": {
                            "n_channels": 3,
                            "rt60": 0.0,
                            "taps": 8,
                            "direct_delay_range": [0, 6],
                        }
                    },
                    "gains": None,
                    "condition": {"M": 3, "N": 2, "rt60": 0.0},
                }
            )
        )
    path = root / "set.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    manifest_path = build_manifest(root)
    data_dir = root / "data"
    materialize(load_manifest(manifest_path), data_dir)
    return data_dir


class TestResolveNu:
    def test_number(self):
        assert resolve_nu("2.5", 3) == 2.5

    def test_channel_count_token(self):
        assert resolve_nu("M", 4) == 4.0

    def test_infinity_token(self):
        assert resolve_nu("inf", 3) == np.inf

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            resolve_nu("-1", 3)

    def test_garbage_rejected(self):
        with pytest.raises(ValueError, match="parse"):
            resolve_nu("abc", 3)


class TestRunConfig:
    def test_round_trip(self):
        config = RunConfig(dataset="d", nu_values=("1", "M", "acg"), seed=3)
        again = RunConfig.from_dict(config.to_dict())
        assert again == config

    def test_rank1_token_normalized(self):
        config = RunConfig(dataset="d", shape="rank1")
        assert config.shape == "rank_one"

    def test_bad_arm_token_rejected(self):
        with pytest.raises(ValueError, match="parse"):
            RunConfig(dataset="d", nu_values=("xyz",))

    def test_empty_arms_rejected(self):
        with pytest.raises(ValueError, match="at least one arm"):
            RunConfig(dataset="d", nu_values=())

    def test_bad_stft_rejected_before_running(self):
        with pytest.raises(ValueError):
            RunConfig(dataset="d", window_length=256, hop=512)

    def test_load_yaml(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("dataset: d\nnu_values: ['1', 'M']\nseed: 9\n")
        config = RunConfig.load(path)
        assert config.seed == 9
        assert config.nu_values == ("1", "M")


class TestMix:
    def test_materializes_manifest(self, tmp_path):
        manifest = build_manifest(tmp_path, n_records=1)
        result = run_cli("mix", manifest, tmp_path / "out")
        assert result.exit_code == 0, result.output
        assert (tmp_path / "out" / "mix0000" / "mixture.wav").is_file()
        assert (tmp_path / "out" / "mix0000" / "metadata.json").is_file()

    def test_repeat_is_identical(self, tmp_path):
        manifest = build_manifest(tmp_path, n_records=1)
        assert run_cli("mix", manifest, tmp_path / "one").exit_code == 0
        assert run_cli("mix", manifest, tmp_path / "two").exit_code == 0
        a = (tmp_path / "one" / "mix0000" / "mixture.wav").read_bytes()
        b = (tmp_path / "two" / "mix0000" / "mixture.wav").read_bytes()
        assert a == b

    def test_broken_source_path_names_record(self, tmp_path):
        manifest = tmp_path / "bad.jsonl"
        manifest.write_text(
            json.dumps(
                {
                    "name": "broken0",
                    "sources": [str(tmp_path / "missing.wav")],
                    "rir": {
                        "synthetic": {
                            "n_channels": 2,
                            "rt60": 0.0,
                            "taps": 4,
                            "direct_delay_range": [0, 3],
                        }
                    },
                }
            )
            + "\n"
        )
        result = run_cli("mix", manifest, tmp_path / "out")
        assert result.exit_code != 0
        assert "broken0" in result.output


class TestSeparate:
    def test_writes_estimates_and_snapshot(self, dataset, tmp_path):
        out = tmp_path / "sep"
        result = run_cli(
            "separate", dataset / "mix0000" / "mixture.wav",
            "-o", out, "--nu", "1", *SMALL,
        )
        assert result.exit_code == 0, result.output
        assert (out / "est_00.wav").is_file()
        assert (out / "est_01.wav").is_file()
        snapshot = json.loads((out / "config.json").read_text())
        assert snapshot["nu_values"] == ["1"]
        assert snapshot["version"]

    def test_save_masks_round_trips(self, dataset, tmp_path):
        out = tmp_path / "sep"
        result = run_cli(
            "separate", dataset / "mix0000" / "mixture.wav",
            "-o", out, "--save-masks", *SMALL,
        )
        assert result.exit_code == 0, result.output
        masks = load_masks(out / "masks.bin")
        assert masks.n_sources == 2
        sums = masks.gamma.sum(axis=0)
        assert np.max(np.abs(sums - 1.0)) <= 1e-9

    def test_channel_count_tail_matches_reference_engine(self, dataset, tmp_path):
        out_m = tmp_path / "m"
        out_acg = tmp_path / "acg"
        wav = dataset / "mix0000" / "mixture.wav"
        args = ["-o", None, "--seed", "0", "--save-masks", *SMALL]
        for out, token in ((out_m, "M"), (out_acg, "acg")):
            args[1] = out
            result = run_cli("separate", wav, "--nu", token, *args)
            assert result.exit_code == 0, result.output
        mask_diff = np.max(
            np.abs(
                load_masks(out_m / "masks.bin").gamma
                - load_masks(out_acg / "masks.bin").gamma
            )
        )
        assert mask_diff <= 1e-4
        for n in range(2):
            a = read_wav(out_m / f"est_{n:02d}.wav").samples
            b = read_wav(out_acg / f"est_{n:02d}.wav").samples
            assert np.max(np.abs(a - b)) <= 1e-6  # float32 quantization

    def test_missing_input_fails(self, tmp_path):
        result = run_cli(
            "separate", tmp_path / "none.wav", "-o", tmp_path / "out"
        )
        assert result.exit_code != 0

    def test_mono_input_fails_cleanly(self, tmp_path):
        wav = tmp_path / "mono.wav"
        write_wav(wav, MultichannelWaveform(np.zeros((1, 4000)) + 0.1, 16000))
        result = run_cli("separate", wav, "-o", tmp_path / "out", *SMALL)
        assert result.exit_code != 0
        assert "channel" in result.output

    def test_bad_nu_token_fails_cleanly(self, dataset, tmp_path):
        result = run_cli(
            "separate", dataset / "mix0000" / "mixture.wav",
            "-o", tmp_path / "out", "--nu", "zero",
        )
        assert result.exit_code != 0
        assert "parse" in result.output


class TestSweep:
    def test_two_arm_report(self, dataset, tmp_path):
        out = tmp_path / "run"
        result = run_cli(
            "sweep", dataset, "-o", out, "--nu", "1", "--nu", "M",
            *SMALL_EVAL,
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert len(report["rows"]) == 2 * 2 * 2  # records x arms x sources
        assert report["failures"] == []
        assert set(report["arm_means"]) == {"1", "M"}
        assert len(report["paired"]) == 1
        stat = report["paired"][0]
        for key in ("delta_mean", "se", "p_raw", "p_holm", "d_z"):
            assert key in stat
        assert stat["labels"] == ["nu=M", "nu=1"]
        assert (out / "rows.csv").is_file()
        assert (out / "paired.csv").is_file()
        assert (out / "config.json").is_file()

    def test_single_arm_means_only(self, dataset, tmp_path):
        out = tmp_path / "run"
        result = run_cli(
            "sweep", dataset, "-o", out, "--nu", "1", *SMALL_EVAL
        )
        assert result.exit_code == 0, result.output
        report = json.loads((out / "report.json").read_text())
        assert report["paired"] == []
        assert not (out / "paired.csv").exists()
        assert set(report["arm_means"]) == {"1"}

    def test_snapshot_rerun_is_bit_identical(self, dataset, tmp_path):
        first = tmp_path / "first"
        result = run_cli(
            "sweep", dataset, "-o", first, "--nu", "1", "--nu", "M",
            *SMALL_EVAL,
        )
        assert result.exit_code == 0, result.output
        second = tmp_path / "second"
        result = run_cli(
            "sweep", "-o", second, "--snapshot", first / "config.json"
        )
        assert result.exit_code == 0, result.output
        assert (first / "report.json").read_bytes() == (
            second / "report.json"
        ).read_bytes()
        assert (first / "rows.csv").read_bytes() == (
            second / "rows.csv"
        ).read_bytes()

    def test_job_count_does_not_change_output(self, dataset, tmp_path):
        serial = tmp_path / "serial"
        parallel = tmp_path / "parallel"
        base = ["--nu", "1", "--nu", "M", *SMALL_EVAL]
        assert run_cli("sweep", dataset, "-o", serial, *base).exit_code == 0
        assert (
            run_cli(
                "sweep", dataset, "-o", parallel, "--jobs", "2", *base
            ).exit_code
            == 0
        )
        assert (serial / "report.json").read_bytes() == (
            parallel / "report.json"
        ).read_bytes()


class TestRecover:
    def test_limit_models_recovered(self, dataset, tmp_path):
        out = tmp_path / "rec"
        result = run_cli("recover", dataset, "-o", out, *SMALL_EVAL)
        assert result.exit_code == 0, result.output
        report = json.loads((out / "recovery.json").read_text())
        arms = report["arms"]
        assert set(arms) == {"acg", "bingham", "watson"}
        assert arms["acg"]["mean_abs_delta_sdri_db"] <= 1e-6
        assert arms["bingham"]["mean_abs_delta_sdri_db"] <= 1e-2
        assert arms["watson"]["mean_abs_delta_sdri_db"] <= 1e-2
        for summary in arms.values():
            assert np.isfinite(summary["max_mask_diff"])
        assert (out / "recovery.csv").is_file()


class TestEval:
    def test_perfect_estimates_capped(self, dataset, tmp_path):
        refs = dataset / "mix0000"
        est_dir = tmp_path / "est"
        ref_dir = tmp_path / "ref"
        est_dir.mkdir()
        ref_dir.mkdir()
        for n in range(2):
            blob = (refs / f"ref_{n:02d}.wav").read_bytes()
            (est_dir / f"est_{n:02d}.wav").write_bytes(blob)
            (ref_dir / f"ref_{n:02d}.wav").write_bytes(blob)
        out_csv = tmp_path / "rows.csv"
        result = run_cli(
            "eval", est_dir, ref_dir, "--filter-len", "16", "-o", out_csv
        )
        assert result.exit_code == 0, result.output
        lines = out_csv.read_text().strip().splitlines()
        assert len(lines) == 3
        for line in lines[1:]:
            assert line.split(",")[2] == "100.0"

    def test_mixture_as_estimate_gives_zero_improvement(self, dataset, tmp_path):
        rec = dataset / "mix0000"
        mixture = read_wav(rec / "mixture.wav")
        est_dir = tmp_path / "est"
        ref_dir = tmp_path / "ref"
        est_dir.mkdir()
        ref_dir.mkdir()
        for n in range(2):
            write_wav(
                est_dir / f"est_{n:02d}.wav",
                MultichannelWaveform(mixture.samples[:1], mixture.sample_rate),
            )
            (ref_dir / f"ref_{n:02d}.wav").write_bytes(
                (rec / f"ref_{n:02d}.wav").read_bytes()
            )
        out_csv = tmp_path / "rows.csv"
        result = run_cli(
            "eval", est_dir, ref_dir,
            "--mixture", rec / "mixture.wav",
            "--filter-len", "16", "-o", out_csv,
        )
        assert result.exit_code == 0, result.output
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].split(",")[3] == "sdri_db"
        for line in lines[1:]:
            assert float(line.split(",")[3]) == 0.0

    def test_materialized_record_dir_is_scorable(self, dataset, tmp_path):
        """A record directory from `mix` also holds mixture.wav; eval must
        narrow to the ref_*.wav convention instead of counting it."""
        rec = dataset / "mix0000"
        est_dir = tmp_path / "est"
        est_dir.mkdir()
        for n in range(2):
            blob = (rec / f"ref_{n:02d}.wav").read_bytes()
            (est_dir / f"est_{n:02d}.wav").write_bytes(blob)
        result = run_cli("eval", est_dir, rec, "--filter-len", "16")
        assert result.exit_code == 0, result.output
        assert "mixture.wav" not in result.output
        assert result.output.count("<-") == 2

    def test_mismatched_counts_fail(self, dataset, tmp_path):
        est_dir = tmp_path / "est"
        ref_dir = tmp_path / "ref"
        est_dir.mkdir()
        ref_dir.mkdir()
        blob = (dataset / "mix0000" / "ref_00.wav").read_bytes()
        (est_dir / "a.wav").write_bytes(blob)
        (ref_dir / "a.wav").write_bytes(blob)
        (ref_dir / "b.wav").write_bytes(blob)
        result = run_cli("eval", est_dir, ref_dir)
        assert result.exit_code != 0
        assert "1 estimate file(s) vs 2" in result.output

    def test_empty_dirs_fail(self, tmp_path):
        est_dir = tmp_path / "est"
        ref_dir = tmp_path / "ref"
        est_dir.mkdir()
        ref_dir.mkdir()
        result = run_cli("eval", est_dir, ref_dir)
        assert result.exit_code != 0


class TestPlot:
    def test_renders_svg_from_sweep_report(self, dataset, tmp_path):
        out = tmp_path / "run"
        result = run_cli(
            "sweep", dataset, "-o", out, "--nu", "1", "--nu", "M",
            *SMALL_EVAL,
        )
        assert result.exit_code == 0, result.output
        svg = tmp_path / "curves.svg"
        result = run_cli("plot", out / "report.json", "-o", svg)
        assert result.exit_code == 0, result.output
        text = svg.read_text()
        assert text.lstrip().startswith("<?xml")
        assert "<svg" in text

    def test_empty_report_fails(self, tmp_path):
        path = tmp_path / "report.json"
        path.write_text(json.dumps({"rows": []}))
        result = run_cli("plot", path, "-o", tmp_path / "x.svg")
        assert result.exit_code != 0
