# -*- coding: utf-8 -*-
import itertools
import os
import struct
import sys
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np


ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from core.dataio import (
    MANIFEST_NAME,
    VideoFeatures,
    decode_video,
    encode_video,
    load_corpus,
    read_manifest,
    read_video,
    save_corpus,
    select_frames,
    synth_labeled_corpus,
    synth_pretrain_corpus,
    write_video,
)
from core.errors import DataFormatError, ShapeError
from core.tokenizer import quantize_many


def f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def sample_video(with_frames: bool, with_patches: bool, with_label: bool) -> VideoFeatures:
    rng = np.random.default_rng(51)
    return VideoFeatures(
        id="视频-01",
        objects=rng.standard_normal((2, 3, 4)),
        frames=rng.standard_normal((2, 4)) if with_frames else None,
        patches=rng.standard_normal((2, 3, 5, 6)) if with_patches else None,
        label=3 if with_label else None,
    )


class TestVideoContainer(unittest.TestCase):
    def test_round_trip_all_section_combinations(self) -> None:
        for flags in itertools.product((False, True), repeat=3):
            with self.subTest(flags=flags):
                video = sample_video(*flags)
                back = decode_video(encode_video(video))
                self.assertEqual(back.id, video.id)
                self.assertEqual(back.label, video.label)
                np.testing.assert_array_equal(back.objects, f32(video.objects))
                for name in ("frames", "patches"):
                    original = getattr(video, name)
                    if original is None:
                        self.assertIsNone(getattr(back, name))
                    else:
                        np.testing.assert_array_equal(getattr(back, name), f32(original))
                self.assertEqual(encode_video(back), encode_video(video))

    def test_file_round_trip(self) -> None:
        video = sample_video(True, True, True)
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "a.mfmv")
            write_video(path, video)
            back = read_video(path)
        np.testing.assert_array_equal(back.patches, f32(video.patches))

    def test_truncation_reports_section_and_offset(self) -> None:
        raw = encode_video(sample_video(True, True, False))
        header = 40 + len("视频-01".encode("utf-8"))
        objects_end = header + 2 * 3 * 4 * 4
        with self.assertRaises(DataFormatError) as ctx:
            decode_video(raw[:objects_end + 5])
        self.assertIn("frames", str(ctx.exception))
        self.assertEqual(ctx.exception.offset, objects_end)
        for cut in (0, 10, 39, header + 1, len(raw) - 1):
            with self.assertRaises(DataFormatError):
                decode_video(raw[:cut])

    def test_bad_magic_and_trailing_bytes(self) -> None:
        raw = encode_video(sample_video(False, False, False))
        with self.assertRaises(DataFormatError):
            decode_video(b"ABCD" + raw[4:])
        with self.assertRaises(DataFormatError):
            decode_video(raw + b"\x00")

    def test_oversized_header_dimensions(self) -> None:
        header = struct.pack("<4sIIIIIIIiI", b"MFMV", 1, 2 ** 22, 2 ** 21, 2 ** 21, 0, 0, 0, -1, 1)
        with self.assertRaises(DataFormatError) as ctx:
            decode_video(header + b"v" + bytes(64))
        self.assertEqual(ctx.exception.offset, 41)

    def test_select_frames_keeps_sections_aligned(self) -> None:
        rng = np.random.default_rng(53)
        video = VideoFeatures(id="v", objects=rng.standard_normal((5, 3, 4)), frames=rng.standard_normal((5, 4)),
                              patches=rng.standard_normal((5, 3, 2, 2)), label=1)
        picked = select_frames(video, 3)
        np.testing.assert_array_equal(picked.objects, video.objects[[0, 2, 4]])
        np.testing.assert_array_equal(picked.frames, video.frames[[0, 2, 4]])
        np.testing.assert_array_equal(picked.patches, video.patches[[0, 2, 4]])
        self.assertEqual(picked.label, 1)
        self.assertIs(select_frames(video, 5), video)
        self.assertEqual(select_frames(video, 1).num_frames, 1)
        with self.assertRaises(DataFormatError):
            select_frames(video, 6)

    def test_invalid_shapes(self) -> None:
        with self.assertRaises(ShapeError):
            VideoFeatures(id="x", objects=np.ones((2, 3)))
        with self.assertRaises(ShapeError):
            VideoFeatures(id="x", objects=np.ones((2, 3, 4)), frames=np.ones((3, 4)))
        with self.assertRaises(ShapeError):
            VideoFeatures(id="x", objects=np.ones((2, 3, 4)), patches=np.ones((2, 2, 1, 1)))


class TestCorpus(unittest.TestCase):
    def test_save_and_load(self) -> None:
        videos = synth_labeled_corpus(6, 3, 2, 3, 4, seed=1, vocab_size=8, patch_dim=4)
        with TemporaryDirectory() as tmp:
            save_corpus(tmp, videos)
            manifest = read_manifest(tmp)
            loaded = load_corpus(tmp)
        self.assertEqual([e.id for e in manifest.entries], [v.id for v in videos])
        self.assertEqual([v.label for v in loaded], [v.label for v in videos])
        np.testing.assert_array_equal(loaded[2].objects, f32(videos[2].objects))

    def test_manifest_label_overrides_file(self) -> None:
        videos = synth_labeled_corpus(2, 2, 1, 2, 3, seed=2, vocab_size=8, patch_dim=4)
        with TemporaryDirectory() as tmp:
            save_corpus(tmp, videos)
            path = Path(tmp) / MANIFEST_NAME
            lines = path.read_text(encoding="utf-8").splitlines()
            lines[0] = lines[0].rsplit("\t", 1)[0] + "\t1"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            self.assertEqual(load_corpus(tmp)[0].label, 1)

    def test_manifest_errors(self) -> None:
        videos = synth_labeled_corpus(2, 2, 1, 2, 3, seed=3, vocab_size=8, patch_dim=4)
        with TemporaryDirectory() as tmp:
            save_corpus(tmp, videos)
            path = Path(tmp) / MANIFEST_NAME
            good = path.read_text(encoding="utf-8").splitlines()
            broken = {
                "duplicate": [good[0], good[0]],
                "missing file": [good[0], "lab9\tnope.mfmv\t0"],
                "bad label": [good[0].rsplit("\t", 1)[0] + "\tx"],
                "field count": ["only-one-field"],
            }
            for name, lines in broken.items():
                with self.subTest(case=name):
                    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
                    with self.assertRaises(DataFormatError):
                        read_manifest(tmp)

    def test_missing_manifest(self) -> None:
        with TemporaryDirectory() as tmp:
            with self.assertRaises(OSError):
                load_corpus(tmp)


class TestSynthetic(unittest.TestCase):
    def test_pretrain_corpus_shapes_and_determinism(self) -> None:
        a, cb = synth_pretrain_corpus(3, 2, 5, 8, 4, 6, 16, seed=4)
        b, _ = synth_pretrain_corpus(3, 2, 5, 8, 4, 6, 16, seed=4)
        self.assertEqual(len(a), 3)
        self.assertEqual(a[0].objects.shape, (2, 5, 8))
        self.assertEqual(a[0].frames.shape, (2, 8))
        self.assertEqual(a[0].patches.shape, (2, 5, 4, 6))
        self.assertEqual((cb.size, cb.dim), (16, 6))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.objects, y.objects)
            np.testing.assert_array_equal(x.patches, y.patches)
        c, _ = synth_pretrain_corpus(3, 2, 5, 8, 4, 6, 16, seed=5)
        self.assertFalse(np.array_equal(a[0].objects, c[0].objects))

    def test_patches_concentrate_on_few_tokens(self) -> None:
        videos, cb = synth_pretrain_corpus(2, 3, 6, 8, 4, 16, 64, seed=6, topics_per_video=4)
        for video in videos:
            tokens = quantize_many(video.patches.reshape(-1, 16), cb)
            self.assertLessEqual(len(set(tokens.tolist())), 4)

    def test_labeled_corpus_is_balanced_and_shares_world(self) -> None:
        videos = synth_labeled_corpus(8, 4, 2, 3, 5, seed=7, vocab_size=16, patch_dim=4, with_patches=True)
        self.assertEqual([v.label for v in videos], [0, 1, 2, 3, 0, 1, 2, 3])
        self.assertEqual(videos[0].patches.shape, (2, 3, 4, 4))
        _, cb_a = synth_pretrain_corpus(1, 1, 1, 5, 1, 4, 16, seed=0, world_seed=2)
        _, cb_b = synth_pretrain_corpus(1, 1, 1, 5, 1, 4, 16, seed=9, world_seed=2)
        np.testing.assert_array_equal(cb_a.entries, cb_b.entries)

    def test_invalid_arguments(self) -> None:
        with self.assertRaises(ValueError):
            synth_labeled_corpus(4, 1, 2, 3, 5, seed=0)
        with self.assertRaises(ValueError):
            synth_pretrain_corpus(0, 1, 1, 1, 1, 1, 1, seed=0)


if __name__ == "__main__":
    unittest.main()
