"""Dataset plumbing: splits, windows, resizing, synthetic generation."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from funet.data import (
    ClipBatch,
    ClipDataset,
    DatasetManifest,
    SyntheticVideoSpec,
    clip_windows,
    load_manifest,
    resize_nearest,
    resize_pair,
    sample_clips,
    split_counts,
    synth_generate,
)


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            digest.update(p.relative_to(root).as_posix().encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = SyntheticVideoSpec(n_sequences=8, frames_per_sequence=7, height=32, width=48, seed=5)
    manifest = synth_generate(spec, out)
    return out, manifest


class TestSplitCounts:
    def test_twenty_sequences_largest_remainder(self):
        # 20 * (0.65, 0.175, 0.175) = (13, 3.5, 3.5); the leftover seat
        # goes to the later split on a remainder tie
        assert split_counts(20, (0.65, 0.175, 0.175)) == [13, 3, 4]

    def test_all_train(self):
        assert split_counts(7, (1.0, 0.0, 0.0)) == [7, 0, 0]

    def test_paper_ratios_exact_forty(self):
        assert split_counts(40, (0.65, 0.175, 0.175)) == [26, 7, 7]

    def test_counts_always_total(self):
        for n in range(1, 50):
            assert sum(split_counts(n, (0.65, 0.175, 0.175))) == n


class TestManifest:
    def test_split_assignment_and_round_trip(self, synth_dir, tmp_path):
        _, manifest = synth_dir
        assert len(manifest.sequences) == 8
        by_split = {s: len(manifest.split_sequences(s)) for s in ("train", "val", "test")}
        assert by_split == {"train": 5, "val": 1, "test": 2}
        ids = [s.sequence_id for s in manifest.sequences]
        assert len(set(ids)) == len(ids)
        path = manifest.save(tmp_path / "m.json")
        back = DatasetManifest.load(path)
        assert back.to_dict() == manifest.to_dict()

    def test_split_reproducible_from_seed(self, synth_dir):
        root, manifest = synth_dir
        again = load_manifest(root, seed=manifest.seed)
        assert [s.split for s in again.sequences] == [s.split for s in manifest.sequences]

    def test_val_plus_test_merges(self, synth_dir):
        _, manifest = synth_dir
        vt = manifest.split_sequences("val+test")
        assert len(vt) == 3

    def test_mask_count_mismatch_rejected(self, tmp_path, synth_dir):
        root, _ = synth_dir
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(root, broken, ignore=shutil.ignore_patterns("manifest.json"))
        seq = sorted(p for p in broken.iterdir() if p.is_dir())[0]
        next(iter((seq / "masks").glob("*.png"))).unlink()
        with pytest.raises(ValueError, match="masks"):
            load_manifest(broken)

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope")


class TestWindows:
    def test_eval_tail_alignment(self):
        assert clip_windows(12, 5, 5) == [0, 5, 7]

    def test_exact_fit_single_window(self):
        assert clip_windows(5, 5, 5) == [0]

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            clip_windows(4, 5, 5)

    def test_train_windows_dense(self, synth_dir):
        _, manifest = synth_dir
        wins = sample_clips(manifest, "train", t=5)
        # 5 train sequences x (7 - 5 + 1) dense starts
        assert len(wins) == 5 * 3

    def test_eval_windows_cover_every_frame(self, synth_dir):
        _, manifest = synth_dir
        wins = sample_clips(manifest, "test", t=5)
        covered = {}
        for seq_id, start in wins:
            for i in range(start, start + 5):
                covered.setdefault(seq_id, set()).add(i)
        for seq in manifest.split_sequences("test"):
            assert covered[seq.sequence_id] == set(range(7))


class TestResize:
    def test_identity_at_target(self, rng):
        frame = rng.random((3, 8, 8)).astype(np.float32)
        mask = (rng.random((1, 8, 8)) > 0.5).astype(np.float32)
        rf, rm = resize_pair(frame, mask, 8, 8)
        np.testing.assert_array_equal(rf, frame)
        np.testing.assert_array_equal(rm, mask)

    def test_constant_frame_stays_constant(self):
        frame = np.full((3, 6, 9), 0.42, dtype=np.float32)
        rf, _ = resize_pair(frame, None, 13, 7)
        np.testing.assert_allclose(rf, 0.42, atol=1e-6)

    def test_mask_value_set_binary_exhaustive(self, rng):
        # every value in the resized mask must be exactly 0 or 1
        for _ in range(10):
            mask = (rng.random((1, 9, 13)) > rng.random()).astype(np.float32)
            _, rm = resize_pair(rng.random((3, 9, 13)).astype(np.float32), mask, 17, 6)
            assert set(np.unique(rm)) <= {0.0, 1.0}

    def test_nearest_preserves_single_pixel_structure(self):
        mask = np.zeros((1, 4, 4), dtype=np.float32)
        mask[0, 1, 2] = 1.0
        up = resize_nearest(mask, 8, 8)
        assert up.sum() == 4.0  # one source pixel -> 2x2 block

    def test_bad_target_rejected(self, rng):
        with pytest.raises(ValueError):
            resize_pair(rng.random((3, 4, 4)).astype(np.float32), None, 0, 5)


class TestClipBatch:
    def test_validate_good(self, rng):
        frames = rng.random((2, 3, 3, 8, 8)).astype(np.float32)
        masks = (rng.random((2, 3, 1, 8, 8)) > 0.5).astype(np.float32)
        ClipBatch(frames, masks).validate()

    def test_rejects_nonbinary_mask(self, rng):
        frames = rng.random((1, 2, 3, 4, 4)).astype(np.float32)
        masks = rng.random((1, 2, 1, 4, 4)).astype(np.float32)
        with pytest.raises(ValueError, match="binary"):
            ClipBatch(frames, masks).validate()

    def test_rejects_out_of_range_frames(self, rng):
        frames = rng.random((1, 2, 3, 4, 4)).astype(np.float32) + 1.0
        with pytest.raises(ValueError, match="0,1"):
            ClipBatch(frames).validate()


class TestSyntheticGeneration:
    def test_deterministic_tree(self, tmp_path):
        spec = SyntheticVideoSpec(n_sequences=2, frames_per_sequence=3, height=24, width=32, seed=11)
        synth_generate(spec, tmp_path / "a")
        synth_generate(spec, tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_file_counts(self, synth_dir):
        root, _ = synth_dir
        frames = list(root.rglob("frames/*.png"))
        masks = list(root.rglob("masks/*.png"))
        assert len(frames) == 8 * 7 and len(masks) == 8 * 7

    def test_static_noiseless_ellipse_frames_identical(self, tmp_path):
        spec = SyntheticVideoSpec(
            n_sequences=1,
            frames_per_sequence=4,
            height=32,
            width=32,
            drift_range=(0.0, 0.0),
            deform_amplitude=0.0,
            noise_sigma=0.0,
            noise_jitter=0.0,
            seed=3,
        )
        synth_generate(spec, tmp_path)
        frames = sorted((tmp_path / "seq0000" / "frames").glob("*.png"))
        payloads = {p.read_bytes() for p in frames}
        assert len(payloads) == 1

    def test_mask_area_matches_rasterization_oracle(self, tmp_path):
        from funet.data import _synth_sequence

        spec = SyntheticVideoSpec(n_sequences=1, frames_per_sequence=2, height=24, width=30, seed=9)
        frames, masks = _synth_sequence(spec, 0)
        # independent oracle: per-pixel python loop with the ellipse inequality
        rng = np.random.default_rng([spec.seed, 0])
        scale = min(24, 30)
        radii = rng.uniform(spec.radius_range[0] * scale, spec.radius_range[1] * scale, size=(1, 2))
        max_r = radii.max(axis=1)
        cx = rng.uniform(max_r + 2, 30 - max_r - 2)[0]
        cy = rng.uniform(max_r + 2, 24 - max_r - 2)[0]
        rng.uniform(*spec.drift_range, size=1)
        rng.uniform(0, 2 * np.pi, size=1)
        phase = rng.uniform(0, 2 * np.pi, size=1)[0]
        wobble = 1.0 + spec.deform_amplitude * np.sin(phase)
        rx, ry = radii[0, 0] * wobble, radii[0, 1] / wobble
        count = 0
        for y in range(24):
            for x in range(30):
                if ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0:
                    count += 1
        assert masks[0].sum() == count

    def test_masks_stay_inside_border(self, synth_dir):
        root, _ = synth_dir
        from funet.data import load_mask

        for p in root.rglob("masks/*.png"):
            m = load_mask(p)[0]
            assert m[0].sum() == 0 and m[-1].sum() == 0
            assert m[:, 0].sum() == 0 and m[:, -1].sum() == 0

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            SyntheticVideoSpec(n_sequences=0).validate()


class TestClipDataset:
    def test_clip_shapes_and_binarity(self, synth_dir):
        _, manifest = synth_dir
        ds = ClipDataset(manifest, "train", t=5, size=(32, 48))
        clip = ds.clip(0).validate()
        assert clip.frames.shape == (1, 5, 3, 32, 48)
        assert clip.masks.shape == (1, 5, 1, 32, 48)

    def test_resize_on_load(self, synth_dir):
        _, manifest = synth_dir
        ds = ClipDataset(manifest, "val", t=5, size=(16, 24))
        clip = ds.clip(0).validate()
        assert clip.frames.shape[-2:] == (16, 24)

    def test_frame_keys_cover_split(self, synth_dir):
        _, manifest = synth_dir
        ds = ClipDataset(manifest, "test", t=5, size=(32, 48))
        keys = ds.frame_keys()
        assert len(keys) == len(manifest.split_sequences("test")) * 7
