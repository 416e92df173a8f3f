import json
import os
import shutil
import tempfile
import unittest
from unittest import mock

from .utils import capture, write_tiny_config


def _run(command):
    """Run the command line interface, return (stdout, stderr)."""
    from foleyforge.cli import main

    with mock.patch("sys.argv", ["forge"] + command.split()):
        with capture(main) as (out, err, ret):
            return out, err


def _fail(testcase, command):
    """Run a failing command, return (exit code, stderr)."""
    with testcase.assertRaises(SystemExit) as cm:
        from foleyforge.cli import main

        with mock.patch("sys.argv", ["forge"] + command.split()):
            with capture(main) as (out, err, ret):
                pass
    return cm.exception.code, err


class CommandLineTestCase(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.mkdtemp()
        self.config = write_tiny_config(os.path.join(self.tempdir, "forge.yaml"))

    def tearDown(self):
        shutil.rmtree(self.tempdir)

    def testVersion(self):
        from foleyforge import __version__

        with self.assertRaises(SystemExit):
            from foleyforge.cli import main

            with mock.patch("sys.argv", ["forge", "--version"]):
                with capture(main) as (out, err, ret):
                    self.assertEqual(out.strip(), f"foleyforge {__version__}")

    def testInvalidConfig(self):
        path = write_tiny_config(
            os.path.join(self.tempdir, "broken.yaml"),
            data={"segments": 0},
            rpo={"beta_w": -1},
        )
        out = os.path.join(self.tempdir, "data")
        code, err = _fail(self, f"synth -q -c {path} --out={out}")
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith("ERROR: Invalid configuration:\n"))
        self.assertIn("  - Invalid value for 'data.segments'", err)
        self.assertIn("  - Invalid value for 'rpo.beta_w'", err)
        self.assertFalse(os.path.exists(out))

    def testInvalidArguments(self):
        out = os.path.join(self.tempdir, "data")
        code, err = _fail(self, f"synth -q -c {self.config} --seed=abc --out={out}")
        self.assertEqual(code, 2)
        self.assertIn("--seed", err)

        code, err = _fail(self, f"synth -q -c {self.config} --preset=many --out={out}")
        self.assertEqual(code, 2)

        code, err = _fail(self, f"pipeline -q -c {self.config} --out={out} train")
        self.assertEqual(code, 2)
        self.assertIn("Unknown stage: train", err)

    def testSynth(self):
        from foleyforge.synthdata import load_manifest

        out = os.path.join(self.tempdir, "data")
        stdout, _ = _run(f"synth -q -c {self.config} --clips=3 --out={out}")
        self.assertEqual(stdout, f"Wrote 3 clips to '{out}'.\n")
        manifest = load_manifest(out)
        self.assertEqual(len(manifest["clips"]), 3)
        self.assertIsNone(manifest["preset"])

        single = os.path.join(self.tempdir, "single")
        _run(f"synth -q -c {self.config} --preset=single --clips=2 --out={single}")
        self.assertEqual(load_manifest(single)["preset"], "single")

        short = os.path.join(self.tempdir, "short")
        stdout, _ = _run(f"synth -q -c {self.config} --n=2 --out={short}")
        self.assertEqual(stdout, f"Wrote 2 clips to '{short}'.\n")
        self.assertEqual(len(load_manifest(short)["clips"]), 2)

    def testMissingStageInput(self):
        out = os.path.join(self.tempdir, "run")
        code, err = _fail(self, f"pipeline -q -c {self.config} --out={out} train-base")
        self.assertEqual(code, 3)
        self.assertIn("ERROR: Stage 'train-base' is missing its input", err)

        code, err = _fail(self, f"report --run={out}")
        self.assertEqual(code, 1)
        self.assertIn("No iteration reports", err)

    def testManifestHash(self):
        from foleyforge.storage import read_json

        hashes = []
        for name, seed in (("a", 0), ("b", 0), ("c", 7)):
            out = os.path.join(self.tempdir, name)
            stdout, _ = _run(
                f"pipeline -q -c {self.config} --seed={seed} --out={out} synth"
            )
            manifest = read_json(os.path.join(out, "run.json"))
            expected = f"Run manifest content hash: {manifest['content_hash']}\n"
            self.assertTrue(stdout.endswith(expected))
            self.assertEqual([r["stage"] for r in manifest["stages"]], ["synth"])
            self.assertEqual(manifest["stages"][0]["outputs"], {"data": "data"})
            hashes.append(manifest["content_hash"])
        self.assertEqual(hashes[0], hashes[1])
        self.assertNotEqual(hashes[0], hashes[2])


class PipelineTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tempdir = tempfile.mkdtemp()
        cls.config = write_tiny_config(os.path.join(cls.tempdir, "forge.yaml"))
        cls.run_dir = os.path.join(cls.tempdir, "run")
        _run(f"pipeline -q -c {cls.config} --out={cls.run_dir}")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tempdir)

    def testArtifacts(self):
        from foleyforge.settings import STAGES
        from foleyforge.storage import file_hash, read_json

        for name in (
            "config.yaml",
            "data/manifest.json",
            "avp.ckpt",
            "avp.ckpt.log.json",
            "base.ckpt",
            "base.ckpt.log.json",
            "rpo/iter_0.json",
            "rpo/iter_1.ckpt",
            "rpo/iter_1.json",
            "rpo/iter_1.log.json",
            "eval.json",
            "report.json",
            "curves.csv",
        ):
            self.assertTrue(os.path.isfile(os.path.join(self.run_dir, name)), name)

        manifest = read_json(os.path.join(self.run_dir, "run.json"))
        self.assertEqual([r["stage"] for r in manifest["stages"]], list(STAGES))
        eval_record = manifest["stages"][4]
        self.assertEqual(
            eval_record["inputs"]["model"],
            file_hash(os.path.join(self.run_dir, "rpo", "iter_1.ckpt")),
        )
        report = read_json(os.path.join(self.run_dir, "eval.json"))
        self.assertEqual(report["n_clips"], 2)
        self.assertEqual(report["seed"], 0)

    def testReproducible(self):
        from foleyforge.storage import read_json

        other = os.path.join(self.tempdir, "again")
        _run(f"pipeline -q -c {self.config} --out={other}")
        first = read_json(os.path.join(self.run_dir, "run.json"))
        second = read_json(os.path.join(other, "run.json"))
        self.assertEqual(first["content_hash"], second["content_hash"])

        # Re-running a stage keeps the records of the others
        _run(f"pipeline -q -c {self.config} --out={other} report")
        third = read_json(os.path.join(other, "run.json"))
        self.assertEqual(len(third["stages"]), 6)
        self.assertEqual(third["content_hash"], first["content_hash"])

    def testRebuildLaterStages(self):
        from foleyforge.storage import read_json

        other = os.path.join(self.tempdir, "rebuilt")
        shutil.copytree(self.run_dir, other)
        for name in ("base.ckpt", "base.ckpt.log.json", "eval.json"):
            os.remove(os.path.join(other, name))
        shutil.rmtree(os.path.join(other, "rpo"))

        _run(f"pipeline -q -c {self.config} --out={other} train-base rpo eval report")
        first = read_json(os.path.join(self.run_dir, "run.json"))
        rebuilt = read_json(os.path.join(other, "run.json"))
        self.assertEqual(len(rebuilt["stages"]), 6)
        self.assertEqual(rebuilt["content_hash"], first["content_hash"])

    def testScore(self):
        avp = os.path.join(self.run_dir, "avp.ckpt")
        data = os.path.join(self.run_dir, "data")
        out, _ = _run(f"score --avp={avp} --data={data} --clip=clip-00000")
        result = json.loads(out)
        self.assertEqual(result["source"], "ground_truth")
        self.assertEqual(result["reward"], "order_stat")
        self.assertEqual(len(result["per_segment"]), 4)
        self.assertEqual(result["s_fs"], min(result["per_segment"]))

        code, err = _fail(self, f"score --avp={avp} --data={data} --clip=clip-09999")
        self.assertEqual(code, 1)
        self.assertIn("clip-09999", err)

        code, err = _fail(
            self, f"score --avp={avp} --data={data} --clip=clip-00000 --reward=max"
        )
        self.assertEqual(code, 2)

    def testGenerateAndScore(self):
        avp = os.path.join(self.run_dir, "avp.ckpt")
        data = os.path.join(self.run_dir, "data")
        model = os.path.join(self.run_dir, "base.ckpt")
        out_dir = os.path.join(self.tempdir, "samples")
        out, _ = _run(
            f"generate -c {self.config} --n=2 --steps=2 --model={model} --avp={avp} "
            f"--data={data} --video=clip-00001 --out={out_dir}"
        )
        outputs = json.loads(out)
        self.assertEqual([entry["index"] for entry in outputs], [0, 1])
        self.assertNotEqual(outputs[0]["seed"], outputs[1]["seed"])
        self.assertEqual(
            sorted(os.listdir(out_dir)),
            [
                "clip-00001.0.audio.npy",
                "clip-00001.0.latent.npy",
                "clip-00001.1.audio.npy",
                "clip-00001.1.latent.npy",
            ],
        )

        latent = outputs[0]["latent"]
        out, _ = _run(
            f"score --avp={avp} --data={data} --clip=clip-00001 --latent={latent} "
            "--reward=mean"
        )
        result = json.loads(out)
        self.assertEqual(result["source"], latent)
        self.assertAlmostEqual(result["s_fs"], result["alignment"])

    def testGenerateFromDirectory(self):
        import numpy as np

        from foleyforge.storage import load_array, save_array

        avp = os.path.join(self.run_dir, "avp.ckpt")
        data = os.path.join(self.run_dir, "data")
        model = os.path.join(self.run_dir, "base.ckpt")
        scene = os.path.join(self.tempdir, "scene")
        os.mkdir(scene)
        shutil.copy(
            os.path.join(data, "clips", "clip-00001.video.npy"),
            os.path.join(scene, "video.npy"),
        )
        out_dir = os.path.join(self.tempdir, "scene-samples")
        command = (
            f"generate -c {self.config} --steps=2 --model={model} --avp={avp} "
            f"--data={data} --video={scene} --out={out_dir}"
        )
        out, _ = _run(command)
        self.assertEqual(len(json.loads(out)), 1)
        self.assertEqual(
            sorted(os.listdir(out_dir)), ["scene.0.audio.npy", "scene.0.latent.npy"]
        )
        latent = load_array(os.path.join(out_dir, "scene.0.latent.npy"))
        self.assertEqual(latent.shape, (16, 16))

        save_array(os.path.join(scene, "video.npy"), np.zeros((8, 16, 16)))
        code, err = _fail(self, command)
        self.assertEqual(code, 1)
        self.assertIn("Shape mismatch for video of", err)

    def testReport(self):
        out, _ = _run(f"report --run={self.run_dir}")
        self.assertEqual(out, f"Wrote report for 2 iterations to '{self.run_dir}'.\n")
