import numpy as np
import pytest

from apfl.cli import main
from apfl.config import dumps_config, parse_config, parse_config_text, preset
from apfl.errors import ConfigError, RejectedInput
from apfl.report import compare, metrics_csv, parse_metrics_csv, read_summary, summary_csv
from apfl.sim import run


class TestParseConfig:
    def test_minimal_defaults(self):
        cfg = parse_config_text("seed = 4\n")
        assert (cfg.C, cfg.K, cfg.hm, cfg.eta, cfg.refine_period) == (2, 10, 2, 0.5, 10)
        assert cfg.seed == 4 and cfg.population.seed == 4

    def test_missing_seed(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("apfl.C = 3\n")
        assert info.value.key == "seed"

    def test_zero_ratio(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("seed = 1\nlink.ratio = 0\n")
        assert info.value.key == "link.ratio" and info.value.line == 2

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("seed = 1\napfl.C = 2\napfl.C = 3\n")
        assert info.value.key == "apfl.C" and info.value.line == 3

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config_text("seed = 1\napfl.etaa = 0.3\n")
        assert info.value.key == "apfl.etaa" and info.value.line == 2

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed = one\n")

    def test_comments_and_preset(self):
        cfg = parse_config_text("# fleet\npreset = fleet20\nseed = 3  # run seed\nbroadcast.mode = oracle\n")
        assert cfg.population.G == 2 and cfg.broadcast_mode == "oracle" and cfg.population.seed == 3

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            parse_config_text("preset = nope\nseed = 1\n")

    def test_roundtrip(self):
        cfg = parse_config_text("preset = D\nseed = 2\ndrift = [{\"client_id\": 1, \"trigger_time\": 5, "
                                "\"new_class_skew\": [1,0,0,0,0,0,0,0,0,0]}]\n")
        again = parse_config_text(dumps_config(cfg))
        assert dumps_config(again) == dumps_config(cfg)
        assert again.drifts[0].client_id == 1

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "missing.cfg")


class TestReport:
    def _trace(self):
        cfg = preset("C")
        cfg.broadcast_mode = "oracle"
        cfg.time_budget = 30.0
        return run(cfg)

    def test_metrics_roundtrip(self):
        tr = self._trace()
        rows = parse_metrics_csv(metrics_csv(tr))
        assert len(rows) == len(tr.rows)
        for a, b in zip(rows, tr.rows):
            assert a == b

    def test_summary_columns(self):
        rec = read_summary(summary_csv(self._trace(), 0.5))[0]
        assert rec["protocol"] == "apfl" and len(rec["client_accuracies"].split(";")) == 5

    def test_missing_column(self):
        text = summary_csv(self._trace(), 0.5)
        header, row = text.splitlines()
        cols = header.split(",")
        drop = cols.index("q_max")
        bad = ",".join(c for i, c in enumerate(cols) if i != drop) + "\n" + row + "\n"
        with pytest.raises(RejectedInput, match="q_max"):
            read_summary(bad)

    def test_compare_reduction_column(self):
        tr = self._trace()
        sync = preset("C")
        sync.protocol = "sync-fedavg"
        sync.time_budget = 30.0
        tables = [read_summary(summary_csv(tr, 0.3)), read_summary(summary_csv(run(sync), 0.3))]
        out = compare(tables)
        assert "time_reduction_pct" in out.splitlines()[0]
        assert len(out.splitlines()) == 3


class TestCli:
    def _config(self, tmp_path, extra=""):
        path = tmp_path / "exp.cfg"
        path.write_text("preset = C\nseed = 1\nstop.time_budget = 30\nbroadcast.mode = oracle\n" + extra)
        return path

    def test_run_writes_csvs(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(self._config(tmp_path)), "--out-dir", str(out)]) == 0
        assert (out / "metrics.csv").read_text().startswith("sim_time_s,event,")
        assert read_summary((out / "summary.csv").read_text())[0]["seed"] == "1"

    def test_standalone_zero_bytes(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(self._config(tmp_path)), "--protocol", "standalone", "--out-dir", str(out)]) == 0
        rec = read_summary((out / "summary.csv").read_text())[0]
        assert rec["up_bytes"] == "0" and rec["down_bytes"] == "0"

    def test_rerun_byte_identical(self, tmp_path):
        cfg = self._config(tmp_path)
        for d in ("a", "b"):
            assert main(["run", "--config", str(cfg), "--seed", "5", "--out-dir", str(tmp_path / d)]) == 0
        for name in ("metrics.csv", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_scenario_d(self, tmp_path):
        out = tmp_path / "d"
        assert main(["scenario", "D", "--broadcast-mode", "never", "--out-dir", str(out)]) == 0
        rec = read_summary((out / "summary.csv").read_text())[0]
        assert rec["n_clients"] == "5" and rec["name"] == "scenario-D"

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("seed = 1\nlink.ratio = 0\n")
        assert main(["run", "--config", str(bad)]) == 1
        assert "link.ratio" in capsys.readouterr().err

    def test_io_error_exit_code(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["run", "--config", str(self._config(tmp_path)), "--out-dir", str(blocker / "sub")]) == 2

    def test_compare(self, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", "--config", str(self._config(tmp_path)), "--out-dir", str(out)])
        capsys.readouterr()
        assert main(["compare", str(out / "summary.csv")]) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[0].startswith("protocol") and len(table) == 2

    def test_compare_missing_column(self, tmp_path, capsys):
        bad = tmp_path / "s.csv"
        bad.write_text("protocol,name\napfl,x\n")
        assert main(["compare", str(bad)]) == 2
        assert "seed" in capsys.readouterr().err


def test_presets_validate():
    for name in ("A", "B", "C", "D", "fleet20", "g4", "g4-40"):
        cfg = preset(name)
        cfg.validate()
        assert np.isclose(sum(cfg.population.class_skew[0]), 1.0)
