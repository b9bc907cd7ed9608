import csv
import json
from pathlib import Path

import numpy as np
from click.testing import CliRunner

from salon.cli import main
from salon.arrayio import load_arrays
from salon.config import save_config

from test_pipeline import toy_config, write_inputs


def input_flags(tmp_path):
    return [
        "--face-image", str(tmp_path / "face.png"),
        "--hair-image", str(tmp_path / "hair.png"),
        "--face-semantics", str(tmp_path / "face_sem.png"),
        "--hair-semantics", str(tmp_path / "hair_sem.png"),
        "--face-keypoints", str(tmp_path / "face_kp.txt"),
        "--hair-keypoints", str(tmp_path / "hair_kp.txt"),
    ]


class TestTransferCommand:
    def test_success_with_config_file(self, tmp_path):
        write_inputs(tmp_path)
        config = toy_config(tmp_path, name="cli_run", iters=(2, 2, 2))
        save_config(config, tmp_path / "config.json")
        result = CliRunner().invoke(main, ["transfer", "--config", str(tmp_path / "config.json")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "cli_run" / "final.png").is_file()

    def test_flags_override_config(self, tmp_path):
        write_inputs(tmp_path)
        config = toy_config(tmp_path, name="overridden", iters=(9, 9, 9))
        save_config(config, tmp_path / "config.json")
        result = CliRunner().invoke(
            main,
            ["transfer", "--config", str(tmp_path / "config.json"), "--iterations", "2,1,1",
             "--output", str(tmp_path / "flag_run")],
        )
        assert result.exit_code == 0, result.output
        record = json.loads((tmp_path / "flag_run" / "record.json").read_text())
        assert record["stages"]["stage1"]["iterations"] == 2

    def test_missing_input_exits_2(self, tmp_path):
        config = toy_config(tmp_path, name="missing")
        save_config(config, tmp_path / "config.json")
        result = CliRunner().invoke(main, ["transfer", "--config", str(tmp_path / "config.json")])
        assert result.exit_code == 2
        assert "face.png" in result.output

    def test_bad_iterations_flag_exits_2(self, tmp_path):
        result = CliRunner().invoke(main, ["transfer", "--iterations", "5,5"])
        assert result.exit_code == 2


class TestOtherCommands:
    def test_guide_writes_debug_artifacts(self, tmp_path):
        write_inputs(tmp_path)
        result = CliRunner().invoke(
            main, ["guide", "--output", str(tmp_path / "guides_out"), *input_flags(tmp_path)]
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "guides_out" / "guide_face.png").is_file()
        assert (tmp_path / "guides_out" / "masks" / "hair_m_roni_h.png").is_file()

    def test_classify_reports_flags_json(self, tmp_path):
        write_inputs(tmp_path)
        result = CliRunner().invoke(
            main,
            [
                "classify",
                "--face-semantics", str(tmp_path / "face_sem.png"),
                "--hair-semantics", str(tmp_path / "hair_sem.png"),
                "--face-keypoints", str(tmp_path / "face_kp.txt"),
                "--hair-keypoints", str(tmp_path / "hair_kp.txt"),
                "--yaw-face", "0", "--yaw-hair", "20",
            ],
        )
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert payload["pose_band"] == "mis15"

    def test_mean_latent_saves_array(self, tmp_path):
        out = tmp_path / "w0.arrays"
        result = CliRunner().invoke(
            main,
            ["mean-latent", "--samples", "64", "--seed", "3", "--output", str(out),
             "--backend-resolution", "16"],
        )
        # resolution 16 needs only 2 upsamples; default layer count is fine
        assert result.exit_code == 0, result.output
        arrays = load_arrays(out)
        assert arrays["mean_latent"].shape == (512,)

    def test_batch_partial_failure_exits_4(self, tmp_path):
        write_inputs(tmp_path)
        rows = [
            {
                "face_image": str(tmp_path / "face.png"),
                "hair_image": str(tmp_path / "hair.png"),
                "face_semantics": str(tmp_path / "face_sem.png"),
                "hair_semantics": str(tmp_path / "hair_sem.png"),
                "face_keypoints": str(tmp_path / "face_kp.txt"),
                "hair_keypoints": str(tmp_path / "hair_kp.txt"),
            },
            {
                "face_image": str(tmp_path / "absent.png"),
                "hair_image": str(tmp_path / "hair.png"),
                "face_semantics": str(tmp_path / "face_sem.png"),
                "hair_semantics": str(tmp_path / "hair_sem.png"),
                "face_keypoints": str(tmp_path / "face_kp.txt"),
                "hair_keypoints": str(tmp_path / "hair_kp.txt"),
            },
        ]
        manifest = tmp_path / "m.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        config = toy_config(tmp_path, iters=(2, 1, 1))
        save_config(config, tmp_path / "config.json")
        result = CliRunner().invoke(
            main,
            ["batch", "--manifest", str(manifest), "--config", str(tmp_path / "config.json"),
             "--output-root", str(tmp_path / "broot")],
        )
        assert result.exit_code == 4, result.output

    def test_eval_command(self, tmp_path):
        write_inputs(tmp_path)
        from salon.images import load_image, save_image

        save_image(load_image(tmp_path / "face.png"), tmp_path / "out.png")
        row = {
            "face_image": str(tmp_path / "face.png"),
            "hair_image": str(tmp_path / "hair.png"),
            "face_semantics": str(tmp_path / "face_sem.png"),
            "hair_semantics": str(tmp_path / "hair_sem.png"),
            "face_keypoints": str(tmp_path / "face_kp.txt"),
            "hair_keypoints": str(tmp_path / "hair_kp.txt"),
            "output_image": str(tmp_path / "out.png"),
        }
        manifest = tmp_path / "eval.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row.keys()))
            writer.writeheader()
            writer.writerow(row)
        result = CliRunner().invoke(
            main,
            ["eval", "--manifest", str(manifest), "--metrics-out", str(tmp_path / "met.csv"),
             "--summary-out", str(tmp_path / "sum.csv")],
        )
        assert result.exit_code == 0, result.output
        with open(tmp_path / "met.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["status"] == "ok"
        assert rows[0]["psnr"] == "inf"
