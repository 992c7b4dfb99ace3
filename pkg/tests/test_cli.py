#!/usr/bin/env python3
"""
Tests for the command-line front end.

Covers settings handling and the exit code of each subcommand:
- Control specs and key=value settings files
- Validation of merged settings
- build / inspect / run exit codes, including rejected and invalid plugins
- One end-to-end invocation through a subprocess
"""

import json
import logging
import subprocess
import sys
from pathlib import Path

import pytest

# Add project root to Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

import run_cquic
from run_cquic import (
    EXIT_ERROR,
    EXIT_LOAD_REJECTED,
    EXIT_OK,
    EXIT_PLUGIN_INVALID,
    EXIT_TIMEOUT,
    main,
)
from src.common.errors import ScenarioTimeout
from src.common.fields import ConnectionField as F
from src.plugins import testing
from src.utils.run_config import build_run_config, parse_control, read_config_file

PROJECT_ROOT = Path(__file__).parent.parent


@pytest.fixture(autouse=True)
def quiet():
    # Suppress all output during tests for cleaner results
    logging.getLogger().setLevel(logging.CRITICAL)
    yield


class TestParseControl:
    """Test plugin:op[:args][@ms] parsing."""

    def test_op_and_time(self):
        """Test a spec without arguments."""
        assert parse_control("privacy_padding:1@50") == {
            "plugin": "privacy_padding", "op": 1, "args": [], "at_ms": 50.0,
        }

    def test_arguments(self):
        """Test comma-separated arguments and a missing time."""
        parsed = parse_control("x:2:1,2")
        assert parsed["args"] == [1, 2]
        assert parsed["at_ms"] == 0.0

    def test_hex_op(self):
        """Test that op accepts a 0x prefix."""
        assert parse_control("probe_path:0x1")["op"] == 1

    @pytest.mark.parametrize("spec", ["privacy_padding", ":1", "p:one", "p:1:a", "p:1@soon"])
    def test_malformed(self, spec):
        """Test that malformed specs raise ValueError."""
        with pytest.raises(ValueError):
            parse_control(spec)

    def test_negative(self):
        """Test that negative values are refused."""
        with pytest.raises(ValueError, match="negative"):
            parse_control("p:1:-3")


class TestSettingsFile:
    """Test key=value settings files and merging with flags."""

    def test_read(self, tmp_path):
        """Test comments, dashed keys and typed values."""
        path = tmp_path / "run.conf"
        path.write_text("# link\nrate = 10\nrtt=100\npeer-backend = beta\n\nplugin = bdp_frame, privacy_padding\n")
        values = read_config_file(str(path))
        assert values == {
            "rate": 10.0,
            "rtt": 100.0,
            "peer_backend": "beta",
            "plugin": ["bdp_frame", "privacy_padding"],
        }

    def test_unknown_key(self, tmp_path):
        """Test that unknown keys name the line."""
        path = tmp_path / "run.conf"
        path.write_text("rate = 10\nbandwidth = 5\n")
        with pytest.raises(ValueError, match=":2: unknown key"):
            read_config_file(str(path))

    def test_line_without_equals(self, tmp_path):
        """Test that a line without '=' is rejected."""
        path = tmp_path / "run.conf"
        path.write_text("rate 10\n")
        with pytest.raises(ValueError, match="key=value"):
            read_config_file(str(path))

    def test_bad_boolean(self, tmp_path):
        """Test that boolean settings only accept boolean words."""
        path = tmp_path / "run.conf"
        path.write_text("charts = maybe\n")
        with pytest.raises(ValueError, match="boolean"):
            read_config_file(str(path))

    def test_flags_override_file(self, tmp_path):
        """Test that given flags win and None flags keep the file value."""
        path = tmp_path / "run.conf"
        path.write_text("rate = 10\nseed = 5\n")
        cfg = build_run_config({"rate": 20.0, "seed": None}, str(path))
        assert cfg.rate == 20.0
        assert cfg.seed == 5

    def test_link_from_settings(self):
        """Test that rate and rtt reach the link model."""
        link = build_run_config({"rate": 10.0, "rtt": 100.0}).link_model()
        assert link.rate_bps == 10_000_000
        assert link.rtt_us == 100_000

    @pytest.mark.parametrize("overrides", [
        {"role": "observer"},
        {"mode": "tcp"},
        {"backend": "gamma"},
        {"host_profile": "everything"},
        {"size": 0},
        {"mode": "udp", "role": "client"},
        {"mode": "udp", "role": "server", "peer_plugin": ["ack_logger"]},
        {"control": ["privacy_padding"]},
        {"loss": 1.5},
    ])
    def test_invalid(self, overrides):
        """Test that inconsistent settings raise ValueError."""
        with pytest.raises(ValueError):
            build_run_config(overrides)


class TestBuildAndInspect:
    """Test the build and inspect subcommands."""

    def test_build_writes_binaries(self, tmp_path, capsys):
        """Test that build writes one .wasm per named plugin."""
        assert main(["build", "--out", str(tmp_path), "ack_logger", "probe_path"]) == EXIT_OK
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ack_logger.wasm", "probe_path.wasm"]

    def test_build_unknown(self, tmp_path, capsys):
        """Test that an unknown plugin name is reported as invalid."""
        assert main(["build", "--out", str(tmp_path), "no_such_plugin"]) == EXIT_PLUGIN_INVALID

    def test_inspect_built_plugin(self, tmp_path, capsys):
        """Test inspect on a freshly built binary."""
        main(["build", "--out", str(tmp_path), "ack_logger"])
        capsys.readouterr()
        assert main(["inspect", str(tmp_path / "ack_logger.wasm")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "after_process_frame_2" in out
        assert "ack_logger" in out

    def test_inspect_corrupt(self, tmp_path, capsys):
        """Test that a non-module file is invalid."""
        path = tmp_path / "corrupt.wasm"
        path.write_bytes(b"\x00asm\x01\x00\x00\x00garbage")
        assert main(["inspect", str(path)]) == EXIT_PLUGIN_INVALID

    def test_inspect_bad_export(self, tmp_path, capsys):
        """Test that a malformed export name is invalid."""
        path = tmp_path / "bad.wasm"
        path.write_bytes(testing.build_bad_export())
        assert main(["inspect", str(path)]) == EXIT_PLUGIN_INVALID
        assert "BadExportName" in capsys.readouterr().out

    def test_inspect_missing_file(self, tmp_path, capsys):
        """Test that a missing file is a general error."""
        assert main(["inspect", str(tmp_path / "absent.wasm")]) == EXIT_ERROR


class TestRun:
    """Test run exit codes in netsim mode."""

    def test_transfer(self, tmp_path, capsys):
        """Test a plugin-free transfer and its output files."""
        out = tmp_path / "out"
        code = main(["run", "--size", "100000", "--out", str(out), "--sandbox", str(tmp_path / "sb")])
        assert code == EXIT_OK
        assert (out / "trace.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["client_backend"] == "alpha"

    def test_transfer_with_plugins(self, tmp_path, capsys):
        """Test a negotiated plugin on both sides across backends."""
        code = main(["run", "--size", "100000", "--backend", "alpha", "--peer-backend", "beta",
                     "--plugin", "dummy_frame", "--peer-plugin", "dummy_frame",
                     "--sandbox", str(tmp_path)])
        assert code == EXIT_OK

    def test_missing_field_rejected(self, tmp_path, capsys):
        """Test that a plugin needing an unexposed field stops the run."""
        path = tmp_path / "needs_cwnd.wasm"
        path.write_bytes(testing.build_needs_field(F.CWND))
        code = main(["run", "--host-profile", "minimal", "--plugin", str(path),
                     "--size", "100000", "--sandbox", str(tmp_path)])
        assert code == EXIT_LOAD_REJECTED
        assert "MissingField" in capsys.readouterr().out

    def test_corrupt_plugin_rejected(self, tmp_path, capsys):
        """Test that a corrupt plugin file is refused at load time."""
        path = tmp_path / "corrupt.wasm"
        path.write_bytes(b"not a module")
        code = main(["run", "--plugin", str(path), "--size", "100000", "--sandbox", str(tmp_path)])
        assert code == EXIT_LOAD_REJECTED

    def test_unknown_plugin(self, tmp_path, capsys):
        """Test that a name that is neither a file nor a catalogue entry is invalid."""
        code = main(["run", "--plugin", "no_such_plugin", "--size", "100000", "--sandbox", str(tmp_path)])
        assert code == EXIT_PLUGIN_INVALID

    def test_bad_setting(self, capsys):
        """Test that invalid settings are general errors."""
        assert main(["run", "--size", "-5"]) == EXIT_ERROR

    def test_timeout(self, tmp_path, monkeypatch, capsys):
        """Test that a scenario timeout maps to its exit code."""
        def timeout(cfg, on_step=None):
            raise ScenarioTimeout("virtual deadline reached")

        monkeypatch.setattr(run_cquic, "run_scenario", timeout)
        assert main(["run", "--size", "100000", "--sandbox", str(tmp_path)]) == EXIT_TIMEOUT


class TestSubprocess:
    """Test the script entry point."""

    def test_inspect_via_script(self, tmp_path):
        """Test build then inspect through separate processes."""
        try:
            build = subprocess.run(
                [sys.executable, "run_cquic.py", "build", "--out", str(tmp_path), "bdp_frame"],
                cwd=PROJECT_ROOT, capture_output=True, text=True, timeout=300,
            )
            assert build.returncode == EXIT_OK, build.stdout + build.stderr
            inspect = subprocess.run(
                [sys.executable, "run_cquic.py", "inspect", str(tmp_path / "bdp_frame.wasm")],
                cwd=PROJECT_ROOT, capture_output=True, text=True, timeout=300,
            )
        except subprocess.TimeoutExpired:
            pytest.fail("run_cquic.py timed out")
        assert inspect.returncode == EXIT_OK, inspect.stdout + inspect.stderr
        assert "0xbd" in inspect.stdout
