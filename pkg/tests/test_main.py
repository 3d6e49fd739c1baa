"""Tests for the command-line entry point."""

import pytest

from speech_linker.config import ConfigError, PipelineConfig
from speech_linker.main import build_parser, main, run
from speech_linker.pipeline import VERBS, PipelineError
from speech_linker.report import MetricsReport


class TestBuildParser:
    """Tests for build_parser."""

    def test_every_verb_accepts_config(self, tmp_path):
        """Test that each verb parses with a --config option."""
        parser = build_parser()

        for verb in VERBS:
            args = parser.parse_args([verb, "--config", str(tmp_path / "c.env")])
            assert args.verb == verb
            assert args.config == tmp_path / "c.env"

    def test_verb_required(self):
        """Test that a missing verb is a usage error."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestRun:
    """Tests for run."""

    def test_success(self, mocker):
        """Test exit code 0 and rendered report lines."""
        mocker.patch("speech_linker.main.load_config", return_value=PipelineConfig())
        run_verb = mocker.patch(
            "speech_linker.main.run_verb",
            return_value=MetricsReport("abc", track2={"accuracy": 1.0}),
        )

        assert run("run-track2", None) == 0
        run_verb.assert_called_once()
        assert run_verb.call_args[0][0] == "run-track2"

    def test_config_error(self, mocker):
        """Test that a configuration error exits with 1 before any stage runs."""
        mocker.patch("speech_linker.main.load_config", side_effect=ConfigError("SEED must be an integer"))
        run_verb = mocker.patch("speech_linker.main.run_verb")

        assert run("eval", None) == 1
        run_verb.assert_not_called()

    def test_stage_error(self, mocker, caplog):
        """Test that a stage failure exits with 1 and logs the stage."""
        mocker.patch("speech_linker.main.load_config", return_value=PipelineConfig())
        mocker.patch(
            "speech_linker.main.run_verb",
            side_effect=PipelineError("run-track1", "Retriever model not found"),
        )

        assert run("run-track1", None) == 1
        assert "[run-track1] Retriever model not found" in caplog.text


class TestMain:
    """Tests for main."""

    def test_exit_code_passed_through(self, mocker, tmp_path):
        """Test that main exits with the code returned by run."""
        mocker.patch("speech_linker.main._setup_logging", return_value=tmp_path / "run.log")
        mocker.patch("speech_linker.main.run", return_value=1)

        with pytest.raises(SystemExit) as exc_info:
            main(["synth"])

        assert exc_info.value.code == 1

    def test_unexpected_error(self, mocker, tmp_path):
        """Test that an unexpected exception exits with 1."""
        mocker.patch("speech_linker.main._setup_logging", return_value=tmp_path / "run.log")
        mocker.patch("speech_linker.main.run", side_effect=RuntimeError("boom"))

        with pytest.raises(SystemExit) as exc_info:
            main(["eval"])

        assert exc_info.value.code == 1

    def test_interrupted(self, mocker, tmp_path):
        """Test that Ctrl-C exits with 130."""
        mocker.patch("speech_linker.main._setup_logging", return_value=tmp_path / "run.log")
        mocker.patch("speech_linker.main.run", side_effect=KeyboardInterrupt)

        with pytest.raises(SystemExit) as exc_info:
            main(["eval"])

        assert exc_info.value.code == 130

    def test_synth_end_to_end(self, tmp_path):
        """Test the synth verb from the command line with a settings file."""
        config = tmp_path / "config.env"
        config.write_text(
            f"KB_PATH={tmp_path / 'kb.jsonl'}\n"
            f"TRAIN_CORPUS={tmp_path / 'train.jsonl'}\n"
            f"EVAL_CORPUS={tmp_path / 'eval.jsonl'}\n"
            "SYNTH_ENTITIES=10\n"
            "SYNTH_UTTERANCES=50\n",
            encoding="utf-8",
        )

        with pytest.raises(SystemExit) as exc_info:
            main(["--logs-dir", str(tmp_path / "logs"), "synth", "--config", str(config)])

        assert exc_info.value.code == 0
        assert (tmp_path / "kb.jsonl").exists()
        assert (tmp_path / "eval.jsonl").exists()
