import math

import numpy as np
import pytest

from function.compute_data.dataset import (
    build_dataset, generate_dataset, load_dataset, orientations_for, read_mask, read_ppm,
)
from function.compute_data.synthgen import SceneSpec, ViewSettings, render_frame
from function.errors import ConfigError, FormatError
from function.io_utils import read_json


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestBuildDataset:
    def test_same_seed_gives_byte_identical_trees(self, tmp_path):
        build_dataset(tmp_path / "a", seed=3, n_train=10, n_val=4)
        build_dataset(tmp_path / "b", seed=3, n_train=10, n_val=4)
        a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        assert all(a[name] == b[name] for name in a)

    def test_sequence_count_rounds_up(self):
        dataset = generate_dataset(seed=1, n_train=100, n_val=3)
        assert len(dataset.sequences("train")) == math.ceil(100 / 8)
        assert dataset.size("train") == 100
        assert dataset.size("val") == 3

    def test_manifest_records_paths_and_visibility(self, tmp_path):
        manifest, _ = build_dataset(tmp_path / "d", seed=2, n_train=4, n_val=2, direction="exo2ego")
        entry = manifest["sequences"][0]["frames"][0]
        assert entry["query_image_path"].endswith("_exo.ppm")
        assert entry["image_path"].endswith("_ego.ppm")
        assert entry["orientations"] == ["exo2ego"]
        mask = read_mask(tmp_path / "d" / entry["target_mask_path"])
        assert entry["visible_target"] == (mask.area() >= 1)
        image = read_ppm(tmp_path / "d" / entry["image_path"])
        assert image.shape == (64, 64, 3)

    def test_joint_manifest_lists_both_orientations(self, tmp_path):
        manifest, _ = build_dataset(tmp_path / "j", seed=2, n_train=3, n_val=1, direction="joint")
        for seq in manifest["sequences"]:
            for entry in seq["frames"]:
                assert entry["orientations"] == ["ego2exo", "exo2ego"]

    def test_scene_records_rerender_stored_masks(self, tmp_path):
        manifest, _ = build_dataset(tmp_path / "d", seed=6, n_train=10, n_val=2, direction="joint")
        checked = 0
        for seq in manifest["sequences"]:
            records = read_json(tmp_path / "d" / seq["scene_path"])["frames"]
            assert len(records) == len(seq["frames"])
            for record, entry in zip(records, seq["frames"]):
                frame = render_frame(SceneSpec.from_dict(record["scene"]), ViewSettings.from_dict(record["views"]),
                                     record["text_category"], frame_id=entry["frame_id"], sequence_id=seq["id"])
                assert frame.ego_mask == read_mask(tmp_path / "d" / entry["ego_mask_path"])
                assert frame.exo_mask == read_mask(tmp_path / "d" / entry["exo_mask_path"])
                assert frame.category == entry["category"]
                checked += 1
        assert checked == 12

    def test_rebuild_replaces_directory(self, tmp_path):
        build_dataset(tmp_path / "d", seed=2, n_train=9, n_val=1)
        build_dataset(tmp_path / "d", seed=2, n_train=2, n_val=1)
        assert read_json(tmp_path / "d" / "manifest.json")["n_train"] == 2
        assert not (tmp_path / "d" / "seq_0002").exists()

    def test_invalid_sizes_and_direction(self, tmp_path):
        with pytest.raises(ConfigError):
            build_dataset(tmp_path / "x", seed=1, n_train=0, n_val=1)
        with pytest.raises(ConfigError):
            generate_dataset(seed=1, n_train=1, n_val=1, direction="sideways")


class TestLoadDataset:
    def test_loaded_frames_match_generated(self, tmp_path):
        _, built = build_dataset(tmp_path / "d", seed=5, n_train=6, n_val=2)
        generated = generate_dataset(seed=5, n_train=6, n_val=2)
        loaded = load_dataset(tmp_path / "d")
        for split in ("train", "val"):
            for fl, fg in zip(loaded.frames(split), generated.frames(split)):
                np.testing.assert_array_equal(fl.ego_image, fg.ego_image)
                np.testing.assert_array_equal(fl.exo_image, fg.exo_image)
                assert fl.ego_mask == fg.ego_mask and fl.exo_mask == fg.exo_mask
                assert (fl.category, fl.text_category) == (fg.category, fg.text_category)
        assert loaded.size("train") == built.size("train")

    def test_unknown_manifest_version(self, tmp_path):
        build_dataset(tmp_path / "d", seed=5, n_train=1, n_val=1)
        path = tmp_path / "d" / "manifest.json"
        path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 9'))
        with pytest.raises(FormatError):
            load_dataset(tmp_path / "d")


class TestPairs:
    def test_orientations(self):
        assert orientations_for("joint") == ["ego2exo", "exo2ego"]
        assert orientations_for("exo2ego") == ["exo2ego"]

    def test_exo2ego_swaps_roles(self, tiny_dataset):
        frame = tiny_dataset.frames("train")[0]
        pair = frame.as_pair("exo2ego")
        assert pair.query_mask == frame.exo_mask
        assert pair.target_mask == frame.ego_mask
        assert pair.visible_query == (frame.exo_mask.area() >= 1)

    def test_visibility_flags_follow_mask_area(self, tiny_dataset):
        for split in ("train", "val"):
            for orientation in ("ego2exo", "exo2ego"):
                for pair in tiny_dataset.pairs(split, orientation):
                    assert pair.visible_query == (pair.query_mask.area() >= 1)
                    assert pair.visible_target == (pair.target_mask.area() >= 1)
