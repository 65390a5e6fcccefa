import json

import numpy as np
import pytest
from PIL import Image

from crosstask.formats import (
    BoxRecord,
    ConfigError,
    FormatError,
    ImageBoxes,
    ManifestRecord,
    dump_boxes,
    parse_boxes,
    parse_config,
    read_boxes,
    read_manifest,
    read_mask,
    read_tensor,
    write_boxes,
    write_manifest,
    write_mask,
    write_tensor,
)
from crosstask.geometry import Box, SemanticMask
from crosstask.mask_for_box import Origin, RefinedBox, RefinementParams


class TestMasks:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        labels = rng.choice([0, 1, 2, 7, 255], (13, 17)).astype(np.uint8)
        write_mask(SemanticMask(labels), tmp_path / "m.png")
        back = read_mask(tmp_path / "m.png")
        assert np.array_equal(back.labels, labels)
        first = (tmp_path / "m.png").read_bytes()
        write_mask(back, tmp_path / "m2.png")
        assert (tmp_path / "m2.png").read_bytes() == first

    def test_pgm_input(self, tmp_path):
        (tmp_path / "m.pgm").write_text("P2\n3 2\n255\n0 1 2\n255 4 5\n")
        assert read_mask(tmp_path / "m.pgm").labels.tolist() == [[0, 1, 2], [255, 4, 5]]

    def test_rgb_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb.png")
        with pytest.raises(FormatError, match="single-channel"):
            read_mask(tmp_path / "rgb.png")

    def test_unknown_format(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image")
        with pytest.raises(FormatError):
            read_mask(tmp_path / "x.png")

    def test_value_above_num_classes(self, tmp_path):
        labels = np.zeros((3, 3), np.uint8)
        labels[2, 1] = 9
        write_mask(SemanticMask(labels), tmp_path / "m.png")
        with pytest.raises(FormatError, match="9"):
            read_mask(tmp_path / "m.png", num_classes=4)


class TestBoxes:
    def doc(self):
        refined = [RefinedBox(Box(1, 2, 30.5, 40.25), 2, 0.9, Origin.SPLIT),
                   RefinedBox(Box(0, 0, 5, 5), 1, 1.0, Origin.LEFTOVER)]
        return [ImageBoxes("a", 64, 48, tuple(BoxRecord.from_refined(r) for r in refined)),
                ImageBoxes("b", 8, 8, ())]

    def test_byte_stable_round_trip(self, tmp_path):
        write_boxes(self.doc(), tmp_path / "b.json")
        data = (tmp_path / "b.json").read_bytes()
        back = read_boxes(tmp_path / "b.json")
        assert back == self.doc()
        assert dump_boxes(back).encode() == data
        assert json.loads(data)["images"][0]["boxes"][0] == {
            "bbox": [1.0, 2.0, 30.5, 40.25], "category": 2, "score": 0.9,
            "origin": "split", "train_classification": False}

    def test_field_order(self):
        text = dump_boxes([ImageBoxes("x", 4, 4, (BoxRecord(Box(0, 0, 1, 1), 1, (0.1, 0.2), 0.2, "add", True),))])
        line = text.splitlines()[2]
        keys = ["bbox", "category", "scores", "score", "origin", "train_classification"]
        assert [line.index(f'"{k}"') for k in keys] == sorted(line.index(f'"{k}"') for k in keys)
        assert "0.100000" in line

    def test_score_broadcast(self):
        text = '{"images": [{"id": "a", "width": 9, "height": 9, "boxes": [{"bbox": [0, 0, 4, 4], "category": 2, "score": 0.7}]}]}'
        (img,) = parse_boxes(text)
        d = img.detections(num_classes=3)[0]
        assert d.scores == (0.0, 0.7, 0.0) and d.scalar_score == 0.7

    @pytest.mark.parametrize("box, match", [
        ('{"bbox": [5, 5, 5, 9], "category": 1}', "positive area"),
        ('{"bbox": [0, 0, 5, 9], "category": 0}', "category"),
        ('{"bbox": [0, 0, 5], "category": 1}', "four numbers"),
        ('{"bbox": [0, 0, 5, 9], "category": 3, "scores": [0.1, 0.2]}', "cover"),
        ('{"bbox": [0, 0, 5, 9], "category": 1, "origin": "other"}', "origin"),
    ])
    def test_rejects(self, box, match):
        text = '{"images": [{"id": "a", "width": 9, "height": 9, "boxes": [{"bbox": [0, 0, 1, 1], "category": 1}, %s]}]}' % box
        with pytest.raises(FormatError, match=match) as info:
            parse_boxes(text)
        assert "boxes[1]" in str(info.value)

    def test_malformed(self):
        with pytest.raises(FormatError):
            parse_boxes("{")
        with pytest.raises(FormatError):
            parse_boxes('{"boxes": []}')


class TestTensor:
    def test_round_trip_and_layout(self, tmp_path):
        arr = np.arange(24, dtype=float).reshape(2, 3, 4)
        write_tensor(arr, tmp_path / "t.bin")
        raw = (tmp_path / "t.bin").read_bytes()
        assert np.frombuffer(raw[:24], "<u8").tolist() == [3, 2, 4]
        assert np.frombuffer(raw[24:32], "<f8")[0] == 0.0 and len(raw) == 24 + 8 * 24
        assert np.array_equal(read_tensor(tmp_path / "t.bin"), arr)

    def test_length_mismatch(self, tmp_path):
        write_tensor(np.zeros((2, 2, 2)), tmp_path / "t.bin")
        (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-8])
        with pytest.raises(FormatError, match="header"):
            read_tensor(tmp_path / "t.bin")


class TestConfig:
    def test_parse(self):
        cfg = parse_config("seed = 3\nsplit_conf = 0.5  # stricter\nlambda = 1.5\nsegmenter = boxfill\n")
        assert cfg.seed == 3 and cfg.lam == 1.5 and cfg.segmenter == "boxfill"
        assert cfg.refinement == RefinementParams(split_conf=0.5)

    def test_seed_required_and_override(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_config("gamma = 0.2")
        assert parse_config("gamma = 0.2", seed_override=11).seed == 11
        assert parse_config("seed = 1", seed_override=11).seed == 11

    @pytest.mark.parametrize("text", ["seed = 1\nbogus = 2", "seed = x", "seed = 1\nsplit_conf = 2",
                                      "seed = 1\nseed = 2", "seed 1", "seed = 1\nsegmenter = crf"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestManifest:
    def test_round_trip(self, tmp_path):
        recs = [ManifestRecord("a", "seg", mask_path=tmp_path / "m" / "a.png"),
                ManifestRecord("b", "det", image_path=tmp_path / "i.png", boxes_path=tmp_path / "b.json")]
        write_manifest(recs, tmp_path / "manifest.json")
        back = read_manifest(tmp_path / "manifest.json")
        assert [(r.image_id, r.task_tag, r.mask_path, r.boxes_path) for r in back] == [
            ("a", "seg", tmp_path / "m" / "a.png", None), ("b", "det", None, tmp_path / "b.json")]

    @pytest.mark.parametrize("rec", [{"image_id": "a", "task_tag": "seg"},
                                     {"image_id": "a", "task_tag": "det", "mask_path": "m.png"},
                                     {"image_id": "a", "task_tag": "both", "mask_path": "m.png"}])
    def test_invalid(self, tmp_path, rec):
        (tmp_path / "m.json").write_text(json.dumps({"records": [rec]}))
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.json")
