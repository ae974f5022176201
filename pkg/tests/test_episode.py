import numpy as np
import pytest

from touchsteer.episode import (
    Episode,
    EpisodeFormatError,
    EpisodeValidationError,
    EpisodeVersionError,
    load_dataset,
    load_episode,
    save_dataset,
    save_episode,
)


def make_episode(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return Episode(
        timestamps=np.arange(n) / 30.0,
        visual=rng.normal(size=(n, 5)),
        tactile=rng.normal(size=(n, 10)),
        pose_state=rng.normal(size=(n, 12)),
        gripper=np.ones(n),
        action_source=rng.normal(size=(n, 12)),
        meta={"task": "slot_insert", "seed": seed, "source": "scripted", "rate_hz": 30.0},
    )


def test_round_trip_bit_exact(tmp_path):
    ep = make_episode()
    path = tmp_path / "ep.tsep"
    save_episode(ep, path)
    back = load_episode(path)
    assert back.meta == ep.meta
    for name in ("timestamps", "visual", "tactile", "pose_state", "gripper", "action_source"):
        a, b = getattr(ep, name), getattr(back, name)
        assert np.array_equal(a.view(np.uint64), b.view(np.uint64))


def test_corrupt_magic_is_format_error(tmp_path):
    path = tmp_path / "bad.tsep"
    ep = make_episode()
    save_episode(ep, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"WHAT"
    path.write_bytes(bytes(blob))
    with pytest.raises(EpisodeFormatError, match="magic"):
        load_episode(path)


def test_version_mismatch_is_distinct(tmp_path):
    path = tmp_path / "v9.tsep"
    save_episode(make_episode(), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(EpisodeVersionError):
        load_episode(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "cut.tsep"
    save_episode(make_episode(), path)
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(EpisodeFormatError, match="truncated"):
        load_episode(path)


def test_non_monotone_timestamps_rejected(tmp_path):
    ep = make_episode()
    ep.timestamps[5] = ep.timestamps[4]
    with pytest.raises(EpisodeValidationError, match="increasing"):
        save_episode(ep, tmp_path / "x.tsep")


def test_dataset_round_trip(tmp_path):
    eps = [make_episode(seed=i) for i in range(5)]
    manifest = save_dataset(eps, tmp_path / "demos", extra_meta={"task": "slot_insert"})
    assert manifest["count"] == 5
    loaded, mf = load_dataset(tmp_path / "demos")
    assert len(loaded) == 5
    assert mf["seeds"] == [0, 1, 2, 3, 4]
    np.testing.assert_array_equal(loaded[3].visual, eps[3].visual)


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(EpisodeFormatError):
        load_dataset(tmp_path)
