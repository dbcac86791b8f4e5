# -*- coding: utf-8 -*-
import os
import sys
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np


ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from core.errors import DataFormatError, ShapeError
from core.tokenizer import (
    Codebook,
    generate_codebook,
    load_codebook,
    quantize,
    save_codebook,
    tokenize_video,
    top_r,
)


def cosine_scan(h: np.ndarray, entries: np.ndarray) -> int:
    best, best_sim = 0, -np.inf
    for j, e in enumerate(entries):
        sim = float(h @ e) / (np.linalg.norm(h) * np.linalg.norm(e))
        if sim > best_sim:
            best, best_sim = j, sim
    return best


def stable_top(u: np.ndarray, r: int) -> set:
    return set(sorted(range(len(u)), key=lambda i: (-u[i], i))[:r])


class TestQuantize(unittest.TestCase):
    def test_matches_cosine_scan_oracle(self) -> None:
        rng = np.random.default_rng(11)
        for _ in range(10000):
            size, dim = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            entries = rng.standard_normal((size, dim))
            h = rng.standard_normal(dim)
            if np.linalg.norm(h) == 0 or np.any(np.linalg.norm(entries, axis=1) == 0):
                continue
            cb = Codebook(entries)
            got = quantize(h, cb)
            self.assertEqual(got, cosine_scan(h, entries))
            self.assertEqual(quantize(3.0 * h, cb), got)

    def test_ties_choose_smallest_index(self) -> None:
        cb = Codebook(np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0]]))
        self.assertEqual(quantize(np.array([5.0, 0.0]), cb), 1)

    def test_zero_vector_rejected(self) -> None:
        cb = generate_codebook(4, 3, 0)
        with self.assertRaises(DataFormatError):
            quantize(np.zeros(3), cb)

    def test_dimension_mismatch(self) -> None:
        cb = generate_codebook(4, 3, 0)
        with self.assertRaises(ShapeError):
            quantize(np.ones(5), cb)

    def test_zero_norm_codebook_row_rejected(self) -> None:
        with self.assertRaises(DataFormatError):
            Codebook(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestTopR(unittest.TestCase):
    def test_matches_stable_sort_oracle_with_ties(self) -> None:
        rng = np.random.default_rng(12)
        for _ in range(10000):
            size = int(rng.integers(1, 40))
            u = rng.integers(0, 4, size=size)
            r = int(rng.integers(1, size + 1))
            v = top_r(u, r)
            self.assertEqual(int(v.sum()), r)
            self.assertEqual(set(np.flatnonzero(v).tolist()), stable_top(u, r))

    def test_out_of_range(self) -> None:
        with self.assertRaises(ValueError):
            top_r(np.array([1, 2, 3]), 0)
        with self.assertRaises(ValueError):
            top_r(np.array([1, 2, 3]), 4)

    def test_all_zero_counts_pick_first_indices(self) -> None:
        np.testing.assert_array_equal(top_r(np.zeros(5), 2), [1, 1, 0, 0, 0])


class TestTokenizeVideo(unittest.TestCase):
    def test_histogram_counts_every_patch(self) -> None:
        rng = np.random.default_rng(13)
        cb = generate_codebook(16, 6, 1)
        patches = rng.standard_normal((3, 4, 5, 6))
        target = tokenize_video(patches, cb, 4)
        self.assertEqual(int(target.u.sum()), 3 * 4 * 5)
        self.assertEqual(int(target.v.sum()), 4)
        self.assertEqual(target.u.shape, (16,))

    def test_noisy_copies_quantize_to_source_entry(self) -> None:
        cb = generate_codebook(8, 16, 2)
        patches = np.stack([cb.entries[[3, 3, 5]] + 0.01 for _ in range(2)])[:, :, None, :]
        target = tokenize_video(patches, cb, 2)
        self.assertEqual(int(target.u[3]), 4)
        self.assertEqual(int(target.u[5]), 2)
        np.testing.assert_array_equal(np.flatnonzero(target.v), [3, 5])

    def test_zero_patch_reports_coordinates(self) -> None:
        cb = generate_codebook(4, 3, 0)
        patches = np.ones((2, 2, 2, 3))
        patches[1, 0, 1] = 0.0
        with self.assertRaises(DataFormatError) as ctx:
            tokenize_video(patches, cb, 1)
        self.assertIn("n=1, k=0, j=1", str(ctx.exception))

    def test_r_out_of_range(self) -> None:
        cb = generate_codebook(4, 3, 0)
        with self.assertRaises(ValueError):
            tokenize_video(np.ones((1, 1, 1, 3)), cb, 5)


class TestCodebookFile(unittest.TestCase):
    def test_generate_is_deterministic_and_unit_norm(self) -> None:
        a, b = generate_codebook(10, 5, 7), generate_codebook(10, 5, 7)
        np.testing.assert_array_equal(a.entries, b.entries)
        np.testing.assert_allclose(np.linalg.norm(a.entries, axis=1), 1.0, atol=1e-12)

    def test_round_trip(self) -> None:
        cb = generate_codebook(12, 4, 3)
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "codebook.mfmc")
            save_codebook(path, cb)
            loaded = load_codebook(path)
            self.assertFalse(os.path.exists(path + ".tmp"))
        np.testing.assert_array_equal(loaded.entries, cb.entries.astype(np.float32).astype(np.float64))

    def test_corrupted_files(self) -> None:
        cb = generate_codebook(4, 4, 0)
        with TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "codebook.mfmc")
            save_codebook(path, cb)
            raw = Path(path).read_bytes()
            for broken in (raw[:10], raw[:-3], b"XXXX" + raw[4:], raw + b"\x00"):
                Path(path).write_bytes(broken)
                with self.assertRaises(DataFormatError):
                    load_codebook(path)


if __name__ == "__main__":
    unittest.main()
