import numpy as np
import pytest
from PIL import Image

from rivid.datamodel import (
    ImageError,
    Manifest,
    ManifestEntry,
    ManifestError,
    check_image,
    load_image,
    load_manifest,
    save_image,
)


def write_png(path, width, height=16, value=128):
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


def write_manifest(path, rows, width_max=None):
    lines = []
    if width_max is not None:
        lines.append(f"# width_max={width_max}")
    lines.append("input_path,hr_path,person_id,resolution")
    lines += [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize("value, expected", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_load_image_scaling(tmp_path, value, expected):
    write_png(tmp_path / "a.png", 8, value=value)
    img = load_image(tmp_path / "a.png")
    assert img.shape == (16, 8, 3)
    assert abs(img[0, 0, 0] - expected) < 1e-9


def test_load_image_rejects_non_image(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not an image")
    with pytest.raises(ImageError):
        load_image(tmp_path / "x.png")
    with pytest.raises(ImageError):
        load_image(tmp_path / "missing.png")


def test_jpeg_input(tmp_path):
    Image.fromarray(np.full((16, 8, 3), 200, dtype=np.uint8)).save(tmp_path / "a.jpg", quality=95)
    img = load_image(tmp_path / "a.jpg")
    assert img.min() >= 0 and img.max() <= 1
    assert abs(img.mean() - 200 / 255) < 0.02


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((20, 12, 3))
    save_image(img, tmp_path / "r.png")
    back = load_image(tmp_path / "r.png")
    assert np.max(np.abs(back - img)) <= 1 / 255
    save_image(back, tmp_path / "r2.png")
    assert np.array_equal(load_image(tmp_path / "r2.png"), back)


def test_check_image_invariants():
    with pytest.raises(ImageError):
        check_image(np.zeros((7, 4, 3)))
    with pytest.raises(ImageError):
        check_image(np.zeros((8, 3, 3)))
    with pytest.raises(ImageError):
        check_image(np.full((8, 4, 3), 1.5))
    check_image(np.zeros((8, 4, 3)))


def test_manifest_half_resolution(tmp_path):
    write_png(tmp_path / "lo.png", 48)
    write_png(tmp_path / "hr.png", 96)
    write_manifest(tmp_path / "m.csv", [("lo.png", "hr.png", 3, 0.5)], width_max=96)
    m = load_manifest(tmp_path / "m.csv")
    assert m.entries[0].resolution == 0.5
    assert m.width_max == 96


def test_manifest_full_resolution_without_metadata(tmp_path):
    write_png(tmp_path / "hr.png", 96)
    write_manifest(tmp_path / "m.csv", [("hr.png", "hr.png", 0, 1.0)])
    m = load_manifest(tmp_path / "m.csv")
    assert m.width_max == 96
    assert m.entries[0].resolution == 1.0


def test_manifest_resolution_mismatch(tmp_path):
    write_png(tmp_path / "lo.png", 48)
    write_manifest(tmp_path / "m.csv", [("lo.png", "lo.png", 0, 0.9)], width_max=96)
    with pytest.raises(ManifestError, match="resolution"):
        load_manifest(tmp_path / "m.csv")


@pytest.mark.parametrize("pid", ["-1", "abc", "1.5"])
def test_manifest_bad_person_id(tmp_path, pid):
    write_png(tmp_path / "a.png", 8)
    write_manifest(tmp_path / "m.csv", [("a.png", "a.png", pid, 1.0)])
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.csv")


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")
    (tmp_path / "bad.csv").write_text("input_path,hr_path,person_id,resolution\na.png,a.png,1\n")
    with pytest.raises(ManifestError, match="fields"):
        load_manifest(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("a,b,c\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(tmp_path / "hdr.csv")


def test_manifest_comments_and_round_trip(tmp_path):
    write_png(tmp_path / "a.png", 24)
    write_png(tmp_path / "b.png", 48)
    (tmp_path / "m.csv").write_text(
        "# width_max=48\n# a free comment\ninput_path,hr_path,person_id,resolution\n"
        "a.png,b.png,7,0.5\n# trailing comment\nb.png,b.png,2,1.0\n"
    )
    m = load_manifest(tmp_path / "m.csv")
    assert [e.person_id for e in m.entries] == [7, 2]
    assert m.identity_table() == {2: 0, 7: 1}
    m.save(tmp_path / "again.csv")
    m2 = load_manifest(tmp_path / "again.csv")
    assert m2.entries == m.entries
    # validating a validated manifest changes nothing
    assert m2.validate().entries == m2.entries
    assert m2.to_csv() == m.to_csv()


def test_manifest_mask_column(tmp_path):
    write_png(tmp_path / "a.png", 8)
    m = Manifest([ManifestEntry("a.png", "a.png", 0, 1.0, "mask.png")], 8, "query", tmp_path)
    m.save(tmp_path / "q.csv")
    back = load_manifest(tmp_path / "q.csv")
    assert back.entries[0].mask_path == "mask.png"
    assert back.split == "query"
