import os
import shutil
import tempfile
import unittest

import numpy as np

from .utils import tiny_config


def _track(events, clip_len=4.0, n_classes=4):
    from foleyforge.synthdata import Event, EventTrack

    return EventTrack(tuple(Event(*event) for event in events), clip_len, n_classes)


class EventTrackTestCase(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_config()["data"]

    def testDeterminism(self):
        from foleyforge.synthdata import gen_event_track

        self.assertEqual(gen_event_track(7, self.cfg), gen_event_track(7, self.cfg))
        self.assertNotEqual(gen_event_track(7, self.cfg), gen_event_track(8, self.cfg))

    def testInvariants(self):
        from foleyforge.synthdata import check_track, gen_event_track, max_simultaneous

        frame_len = self.cfg["clip_len"] / self.cfg["frames"]
        for seed in range(50):
            track = gen_event_track(seed, self.cfg)
            check_track(track)
            peak = max_simultaneous(track)
            self.assertGreaterEqual(peak, self.cfg["min_simultaneous"])
            self.assertLessEqual(peak, self.cfg["max_simultaneous"])
            for event in track.events:
                self.assertAlmostEqual(event.onset / frame_len % 1, 0.0, places=9)
                self.assertGreaterEqual(event.duration, self.cfg["min_duration"])
                self.assertLessEqual(event.duration, self.cfg["max_duration"])
                self.assertGreaterEqual(event.intensity, self.cfg["min_intensity"])

    def testSameClassGap(self):
        from foleyforge.synthdata import gen_event_track

        cfg = dict(self.cfg, rate=4.0)
        for seed in range(30):
            track = gen_event_track(seed, cfg)
            for class_id in range(cfg["n_classes"]):
                events = [e for e in track.events if e.class_id == class_id]
                for first, second in zip(events, events[1:]):
                    gap = second.onset - (first.onset + first.duration)
                    self.assertGreaterEqual(gap, cfg["min_gap"] - 1e-9)

    def testSingleEvent(self):
        from foleyforge.synthdata import gen_event_track, max_simultaneous

        cfg = dict(self.cfg, min_simultaneous=1, max_simultaneous=1, rate=2.0)
        track = gen_event_track(7, cfg)
        self.assertEqual(max_simultaneous(track), 1)
        for first, second in zip(track.events, track.events[1:]):
            self.assertLessEqual(first.onset + first.duration, second.onset + 1e-9)

    def testEventsInsideClip(self):
        from foleyforge.synthdata import gen_event_track

        cfg = tiny_config(data={"clip_len": 8.0, "frames": 64, "spec_bins": 128})
        cfg = dict(cfg["data"], rate=5.0)
        for seed in range(20):
            for event in gen_event_track(seed, cfg).events:
                self.assertLessEqual(event.onset + event.duration, 8.0 + 1e-9)
                self.assertGreaterEqual(event.onset, 0.0)

    def testInvalidConfig(self):
        from foleyforge.errors import ConfigError
        from foleyforge.synthdata import gen_event_track

        with self.assertRaises(ConfigError) as cm:
            gen_event_track(7, dict(self.cfg, min_simultaneous=3, max_simultaneous=2))
        self.assertIn("min_simultaneous > max_simultaneous", cm.exception.errors[0])

    def testCheckTrack(self):
        from foleyforge.errors import ContractViolation
        from foleyforge.synthdata import check_track

        check_track(_track([(0.0, 1.0, 0, 1.0), (0.5, 1.0, 1, 0.5)]))
        for events in (
            [(3.5, 1.0, 0, 1.0)],
            [(0.0, 0.0, 0, 1.0)],
            [(0.0, 1.0, 0, 0.0)],
            [(0.0, 1.0, 4, 1.0)],
            [(1.0, 1.0, 0, 1.0), (0.0, 1.0, 1, 1.0)],
        ):
            with self.assertRaises(ContractViolation):
                check_track(_track(events))

    def testMaxSimultaneous(self):
        from foleyforge.synthdata import max_simultaneous

        self.assertEqual(max_simultaneous(_track([])), 0)
        # Touching intervals do not overlap
        track = _track([(0.0, 1.0, 0, 1.0), (1.0, 1.0, 1, 1.0)])
        self.assertEqual(max_simultaneous(track), 1)
        track = _track([(0.0, 2.0, 0, 1.0), (0.5, 1.0, 1, 1.0), (1.0, 1.0, 2, 1.0)])
        self.assertEqual(max_simultaneous(track), 3)


class RenderTestCase(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_config()["data"]

    def testEmptyTrack(self):
        from foleyforge.synthdata import render_clip

        clip = render_clip(_track([]), self.cfg)
        self.assertEqual(clip.video.shape, (32, 16, 16))
        self.assertEqual(clip.audio.shape, (128, 16))
        self.assertFalse(clip.video.any())
        self.assertFalse(clip.audio.any())

    def testSingleEvent(self):
        from foleyforge.synthdata import class_band, render_clip

        # Class 2 from 1.0 s to 1.5 s: bins 32..47 (32 per second)
        clip = render_clip(_track([(1.0, 0.5, 2, 0.75)]), self.cfg)
        low, high = class_band(2, 4, 16)
        self.assertEqual((low, high), (8, 12))
        active = np.flatnonzero(clip.audio.any(axis=1))
        np.testing.assert_array_equal(active, np.arange(32, 48))
        np.testing.assert_array_equal(clip.audio[32:48, low:high], 0.75)
        self.assertFalse(clip.audio[:, :low].any())
        self.assertFalse(clip.audio[:, high:].any())

        frames = np.flatnonzero(clip.video.reshape(32, -1).any(axis=1))
        np.testing.assert_array_equal(frames, np.arange(8, 12))

    def testBlobLocation(self):
        from foleyforge.synthdata import class_location, render_clip

        for class_id in range(4):
            clip = render_clip(_track([(0.0, 1.0, class_id, 1.0)]), self.cfg)
            row, col = np.unravel_index(clip.video[0].argmax(), (16, 16))
            cy, cx, _ = class_location(class_id, 4, 16, 16)
            self.assertLessEqual(abs(row + 0.5 - cy), 0.5)
            self.assertLessEqual(abs(col + 0.5 - cx), 0.5)
            self.assertLessEqual(float(clip.video[0].max()), 1.0)
            self.assertGreater(float(clip.video[0].max()), 0.9)

    def testAlignment(self):
        from foleyforge.synthdata import EventTrack, make_clip, render_clip

        frame_len = self.cfg["clip_len"] / self.cfg["frames"]
        bin_len = self.cfg["clip_len"] / self.cfg["spec_bins"]
        for seed in range(10):
            clip = make_clip(self.cfg, seed, "clip")
            for event in clip.track.events:
                alone = render_clip(EventTrack((event,), 4.0, 4), self.cfg)
                first_bin = np.flatnonzero(alone.audio.any(axis=1))[0]
                active = alone.video.reshape(32, -1).any(axis=1)
                first_frame = np.flatnonzero(active)[0]
                self.assertLessEqual(abs(first_bin * bin_len - event.onset), bin_len)
                self.assertLessEqual(
                    abs(first_frame * frame_len - first_bin * bin_len), bin_len
                )

    def testSuperposition(self):
        from foleyforge.synthdata import render_clip

        events = [(0.5, 1.0, 0, 0.6), (1.0, 1.0, 3, 0.9)]
        together = render_clip(_track(events), self.cfg)
        parts = [render_clip(_track([event]), self.cfg) for event in events]
        np.testing.assert_allclose(
            together.video, parts[0].video + parts[1].video, atol=1e-6
        )
        np.testing.assert_allclose(
            together.audio, parts[0].audio + parts[1].audio, atol=1e-6
        )
        # Overlap from 1.0 s to 1.5 s: both bands energized
        self.assertTrue((together.audio[32:48, 0:4] == np.float32(0.6)).all())
        self.assertTrue((together.audio[32:48, 12:16] == np.float32(0.9)).all())

    def testNoiseFloor(self):
        from foleyforge.synthdata import make_clip

        cfg = dict(self.cfg, noise_floor=0.01)
        first, second = make_clip(cfg, 3, "a"), make_clip(cfg, 3, "a")
        np.testing.assert_array_equal(first.video, second.video)
        np.testing.assert_array_equal(first.audio, second.audio)
        self.assertTrue((first.audio >= 0).all())
        clean = make_clip(self.cfg, 3, "a")
        self.assertLess(float(np.abs(first.video - clean.video).std()), 0.02)
        self.assertTrue(np.isfinite(first.video).all())


class SplitTestCase(unittest.TestCase):
    def setUp(self):
        from foleyforge.synthdata import make_clip

        self.clip = make_clip(tiny_config()["data"], 1, "clip-00001")

    def testSplit(self):
        from foleyforge.synthdata import split_segments

        pairs = split_segments(self.clip, 4)
        self.assertEqual(len(pairs), 4)
        self.assertEqual([pair.index for pair in pairs], [0, 1, 2, 3])
        self.assertEqual(pairs[0].video.shape, (8, 16, 16))
        self.assertEqual(pairs[0].audio.shape, (32, 16))
        np.testing.assert_array_equal(
            np.concatenate([pair.video for pair in pairs]), self.clip.video
        )
        np.testing.assert_array_equal(
            np.concatenate([pair.audio for pair in pairs]), self.clip.audio
        )

    def testIdentity(self):
        from foleyforge.synthdata import split_segments

        (pair,) = split_segments(self.clip, 1)
        np.testing.assert_array_equal(pair.video, self.clip.video)
        np.testing.assert_array_equal(pair.audio, self.clip.audio)

    def testDefaultGeometry(self):
        from foleyforge.config import default_config
        from foleyforge.synthdata import make_clip, split_segments

        data = default_config()["data"]
        pairs = split_segments(make_clip(data, 0, "clip"), data["segments"])
        self.assertEqual(pairs[0].video.shape, (16, 32, 32))
        self.assertEqual(pairs[0].audio.shape, (64, 32))

    def testNotDivisible(self):
        from foleyforge.errors import ConfigError
        from foleyforge.synthdata import split_segments

        with self.assertRaises(ConfigError):
            split_segments(self.clip, 3)
        with self.assertRaises(ConfigError):
            split_segments(self.clip, 0)


class DatasetTestCase(unittest.TestCase):
    def setUp(self):
        self.tempdir = tempfile.mkdtemp()
        self.cfg = tiny_config()

    def tearDown(self):
        shutil.rmtree(self.tempdir)

    def testBuildAndLoad(self):
        from foleyforge.synthdata import build_dataset, load_dataset, make_clip

        out = os.path.join(self.tempdir, "data")
        manifest = build_dataset(self.cfg, 5, out)
        self.assertEqual(
            [entry["clip_id"] for entry in manifest["clips"]],
            [f"clip-{i:05d}" for i in range(5)],
        )
        self.assertEqual(
            [entry["split"] for entry in manifest["clips"]],
            ["train", "train", "train", "held_out", "held_out"],
        )
        self.assertIsNone(manifest["preset"])
        self.assertTrue(os.path.isfile(os.path.join(out, "manifest.json")))

        clips = load_dataset(out)
        self.assertEqual(len(clips), 5)
        for clip, entry in zip(clips, manifest["clips"]):
            fresh = make_clip(self.cfg["data"], entry["seed"], entry["clip_id"])
            np.testing.assert_array_equal(clip.video, fresh.video)
            np.testing.assert_array_equal(clip.audio, fresh.audio)
            self.assertEqual(clip.track, fresh.track)

        held_out = load_dataset(out, "held_out")
        self.assertEqual([c.clip_id for c in held_out], ["clip-00003", "clip-00004"])

    def testContentHash(self):
        from foleyforge.synthdata import build_dataset

        first = build_dataset(self.cfg, 3, os.path.join(self.tempdir, "a"))
        second = build_dataset(self.cfg, 3, os.path.join(self.tempdir, "b"))
        self.assertEqual(first, second)

        other = build_dataset(
            tiny_config(seed=1), 3, os.path.join(self.tempdir, "c")
        )
        self.assertNotEqual(first["content_hash"], other["content_hash"])
        self.assertEqual(first["config_hash"], other["config_hash"])

    def testEmpty(self):
        from foleyforge.synthdata import build_dataset, load_dataset

        out = os.path.join(self.tempdir, "empty")
        manifest = build_dataset(self.cfg, 0, out)
        self.assertEqual(manifest["clips"], [])
        self.assertEqual(load_dataset(out), [])

    def testPreset(self):
        from foleyforge.synthdata import build_dataset

        cfg = tiny_config(data={"min_simultaneous": 1, "max_simultaneous": 1})
        manifest = build_dataset(cfg, 1, self.tempdir)
        self.assertEqual(manifest["preset"], "single")

    def testMissingManifest(self):
        from foleyforge.errors import IngestionError
        from foleyforge.synthdata import load_dataset

        with self.assertRaises(IngestionError) as cm:
            load_dataset(self.tempdir)
        self.assertIn("manifest.json", cm.exception.description)

    def testUnwritable(self):
        from foleyforge.errors import IngestionError
        from foleyforge.synthdata import build_dataset

        path = os.path.join(self.tempdir, "file")
        open(path, "w").close()
        with self.assertRaises(IngestionError) as cm:
            build_dataset(self.cfg, 1, path)
        self.assertIn(path, cm.exception.description)
