import numpy as np
import pytest

from php_av.errors import ValidationError
from php_av.tasks.synthetic_av_tasks import (
    TaskSpec, make_task, class_text_embeddings, clip_text_targets,
    save_task_dataset, load_task_dataset, read_dataset_manifest,
)
from php_av.oracles.verification_oracles import nearest_class_mean_accuracy


def pooled(split):
    return split.video.mean(axis=(1, 2))


def ncm(spec):
    data = make_task(spec)
    return nearest_class_mean_accuracy(pooled(data.splits["train"]), data.splits["train"].labels,
                                       pooled(data.splits["test"]), data.splits["test"].labels)


def test_same_spec_gives_identical_dataset():
    spec = TaskSpec("AVE", clips_train=20, clips_val=5, clips_test=5, seed=7)
    a, b = make_task(spec), make_task(spec)
    assert a.fingerprint() == b.fingerprint()
    for split in ("train", "val", "test"):
        for name, arr in a.splits[split].arrays().items():
            assert arr.tobytes() == b.splits[split].arrays()[name].tobytes()


def test_different_seed_changes_dataset():
    base = dict(task_id="AVE", clips_train=10, clips_val=2, clips_test=2)
    assert make_task(TaskSpec(seed=1, **base)).fingerprint() != make_task(TaskSpec(seed=2, **base)).fingerprint()


def test_noiseless_two_class_task_is_separable():
    assert ncm(TaskSpec("AVE", num_classes=2, noise_sigma=0.0, seed=3)) == 100.0


def test_nearest_class_mean_golden(golden):
    # pooled noise std 0.5/sqrt(80) against a class margin of at least 0.48
    acc = ncm(TaskSpec("AVE", num_classes=4, noise_sigma=0.5, seed=1))
    golden("ncm_seed1_classes4_noise0.5", acc)


def test_missing_golden_value_fails(golden, pytestconfig):
    if pytestconfig.getoption("--record-golden", default=False):
        pytest.skip("recording golden values")
    with pytest.raises(pytest.fail.Exception):
        golden("not_recorded", 1.0)


def test_accuracy_does_not_increase_with_noise():
    accs = [ncm(TaskSpec("AVE", num_classes=4, noise_sigma=s, seed=1)) for s in (0.0, 0.25, 0.5, 1.0)]
    assert all(later <= earlier for earlier, later in zip(accs, accs[1:]))


def test_splits_are_disjoint_and_sized():
    spec = TaskSpec("AVE", clips_train=12, clips_val=4, clips_test=6)
    data = make_task(spec)
    indices = [set(data.splits[s].clip_index.tolist()) for s in ("train", "val", "test")]
    assert [len(i) for i in indices] == [12, 4, 6]
    assert not (indices[0] & indices[1]) and not (indices[0] & indices[2]) and not (indices[1] & indices[2])


def test_clip_layout_and_labels():
    spec = TaskSpec("AVE", num_classes=5, time_steps=3, video_grid=(2, 3), audio_grid=(4, 1),
                    base_channels=6, clips_train=8, clips_val=2, clips_test=2)
    clip = make_task(spec).splits["train"].clip(0)
    assert clip.video_raw.shape == (3, 6, 6)
    assert clip.audio_raw.shape == (3, 4, 6)
    assert clip.video_raw.dtype == np.float32
    assert 0 <= clip.label < 5
    assert clip.question_id is None


def test_multi_label_is_multi_hot_within_limit():
    spec = TaskSpec("AVVP", "multi_label", num_classes=5, max_active=2, clips_train=40, clips_val=2, clips_test=2)
    labels = make_task(spec).splits["train"].labels
    assert labels.shape == (40, 5)
    active = labels.sum(axis=1)
    assert active.min() >= 1 and active.max() <= 2


def test_qa_question_ids_follow_composite_class():
    spec = TaskSpec("AVQA", "qa_style", num_classes=6, num_questions=2, clips_train=30, clips_val=2, clips_test=2)
    train = make_task(spec).splits["train"]
    assert np.array_equal(train.question_ids, train.labels // 3)


@pytest.mark.parametrize("bad", [
    dict(num_classes=1),
    dict(time_steps=0),
    dict(video_grid=(0, 4)),
    dict(flavor="segmentation"),
    dict(noise_sigma=-1.0),
    dict(num_classes=5, num_questions=2, flavor="qa_style"),
])
def test_invalid_spec_is_rejected(bad):
    with pytest.raises(ValidationError):
        make_task(TaskSpec("X", **bad))


def test_text_embeddings_are_orthonormal_and_deterministic():
    spec = TaskSpec("AVE", num_classes=4)
    emb = class_text_embeddings(spec, 8)
    assert emb.shape == (4, 8)
    np.testing.assert_allclose(emb @ emb.T, np.eye(4), atol=1e-6)
    assert np.array_equal(emb, class_text_embeddings(spec, 8))


def test_text_embeddings_need_dim_at_least_classes():
    with pytest.raises(ValidationError):
        class_text_embeddings(TaskSpec("AVE", num_classes=3), 2)


def test_multi_label_text_target_is_normalized_sum():
    spec = TaskSpec("AVVP", "multi_label", num_classes=3, max_active=2)
    emb = class_text_embeddings(spec, 4)
    target = clip_text_targets(spec, np.array([[1, 0, 1]], dtype=np.uint8), emb)[0]
    np.testing.assert_allclose(target, (emb[0] + emb[2]) / np.sqrt(2), atol=1e-6)


def test_dataset_round_trips_through_disk(tmp_path):
    data = make_task(TaskSpec("AVQA", "qa_style", num_classes=4, num_questions=2,
                              clips_train=10, clips_val=3, clips_test=3))
    save_task_dataset(data, tmp_path / "AVQA")
    manifest = read_dataset_manifest(tmp_path / "AVQA")
    assert manifest["splits"]["train"]["video"]["dtype"] == "<f4"
    assert manifest["task_spec"]["task_id"] == "AVQA"
    loaded = load_task_dataset(tmp_path / "AVQA")
    assert loaded.spec == data.spec
    assert loaded.fingerprint() == data.fingerprint()


def test_tampered_dataset_array_is_rejected(tmp_path):
    data = make_task(TaskSpec("AVE", clips_train=6, clips_val=2, clips_test=2))
    save_task_dataset(data, tmp_path)
    np.save(tmp_path / "train.video.npy", np.zeros((1, 2), dtype="<f4"))
    with pytest.raises(ValidationError):
        load_task_dataset(tmp_path)


def test_missing_dataset_is_a_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        load_task_dataset(tmp_path / "nothing")
