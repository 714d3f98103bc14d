import numpy as np
import pytest

from pregen.synth import (
    SynthConfig,
    SynthConfigError,
    build_codebook,
    build_concept_codes,
    generate_synthetic_dataset,
    oracle_nn_recall,
    write_dataset,
)


def test_default_fixture_counts(fixture_pair):
    train, _ = fixture_pair
    m = train.manifest
    assert len(m.sample_ids("query")) == 192
    assert len(m.sample_ids("target")) == 192
    assert len(m.triplets) == 192
    assert len({t.group_key for t in m.triplets}) == 64


def test_generation_is_deterministic(tmp_path):
    cfg = SynthConfig(seed=11)
    a = generate_synthetic_dataset(cfg)
    b = generate_synthetic_dataset(cfg)
    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    pa, pb = write_dataset(a, dir_a), write_dataset(b, dir_b)
    assert pa.read_bytes() == pb.read_bytes()
    for entry in a.manifest.samples:
        assert (dir_a / entry.path).read_bytes() == (dir_b / entry.path).read_bytes()


def test_different_seed_changes_data():
    a = generate_synthetic_dataset(SynthConfig(seed=0))
    b = generate_synthetic_dataset(SynthConfig(seed=1))
    tid = a.manifest.triplets[0].target_id
    assert not np.array_equal(a.stacks[tid].data, b.stacks[tid].data)


def test_zero_noise_query_equals_target():
    data = generate_synthetic_dataset(SynthConfig(noise_sigma=0.0))
    for t in data.manifest.triplets:
        assert np.array_equal(data.stacks[t.query_id].data, data.stacks[t.target_id].data)


def test_zero_noise_raw_nearest_neighbor_is_perfect():
    # independent check on flattened raw stacks, no model involved
    data = generate_synthetic_dataset(SynthConfig(noise_sigma=0.0))
    m = data.manifest
    target_ids = m.sample_ids("target")
    gallery = np.stack([data.stacks[t].data.ravel() for t in target_ids]).astype(np.float64)
    gallery /= np.linalg.norm(gallery, axis=1, keepdims=True)
    hits = 0
    for trip in m.triplets:
        q = data.stacks[trip.query_id].data.ravel().astype(np.float64)
        scores = gallery @ (q / np.linalg.norm(q))
        hits += target_ids[int(np.argmax(scores))] == trip.target_id
    assert hits == len(m.triplets)


def test_codebook_norms_and_separation():
    rng = np.random.default_rng(0)
    book = build_codebook(rng, num_layers=3, alphabet=6, dim=16)
    norms = np.linalg.norm(book, axis=2)
    assert np.allclose(norms, 1.0, atol=1e-6)
    for layer in range(3):
        grid = book[layer].astype(np.float64) @ book[layer].astype(np.float64).T
        off = grid - np.diag(np.diag(grid))
        assert np.max(np.abs(off)) <= 0.5 + 1e-6


def test_codebook_infeasible_separation():
    rng = np.random.default_rng(0)
    with pytest.raises(SynthConfigError):
        build_codebook(rng, num_layers=1, alphabet=50, dim=2)


def test_concept_codes_distinct_and_shared():
    rng = np.random.default_rng(5)
    codes = build_concept_codes(rng, num_layers=4, alphabet=4, count=64)
    assert codes.shape == (64, 4)
    assert len(np.unique(codes, axis=0)) == 64
    # prefix-distinct regime: 64 <= 4**3
    assert len(np.unique(codes[:, :3], axis=0)) == 64
    for pos in range(4):
        occ = np.bincount(codes[:, pos], minlength=4)
        assert not np.any(occ == 1)


def test_concept_codes_small_counts():
    rng = np.random.default_rng(2)
    for count, alphabet in ((5, 4), (7, 4), (9, 4), (12, 5)):
        codes = build_concept_codes(rng, num_layers=4, alphabet=alphabet, count=count)
        assert len(np.unique(codes, axis=0)) == count
        for pos in range(codes.shape[1]):
            occ = np.bincount(codes[:, pos], minlength=alphabet)
            assert not np.any(occ == 1)


def test_variants_differ_in_exactly_last_position(fixture_pair):
    train, _ = fixture_pair
    for concept, code in enumerate(train.concept_codes):
        group = f"c{concept:04d}"
        members = [t.target_id for t in train.manifest.triplets if t.group_key == group]
        assert len(members) == 3
        seen_last = set()
        for tid in members:
            variant = train.target_codes[tid]
            assert np.array_equal(variant[:-1], code[:-1])
            assert variant[-1] != code[-1]
            seen_last.add(int(variant[-1]))
        assert len(seen_last) == 3  # distinct edits inside a group


def test_target_codes_globally_unique(fixture_pair):
    train, _ = fixture_pair
    all_codes = np.stack(list(train.target_codes.values()))
    assert len(np.unique(all_codes, axis=0)) == len(all_codes)


def test_infeasible_configs_rejected():
    with pytest.raises(SynthConfigError, match="group_size"):
        SynthConfig(group_size=4, alphabet_size=4).validate()
    with pytest.raises(SynthConfigError, match="distinct codes"):
        SynthConfig(num_concepts=300, alphabet_size=4, num_layers=4).validate()
    with pytest.raises(SynthConfigError, match="even"):
        SynthConfig(dim=15).validate()


def test_split_pair_shares_structure_not_noise(fixture_pair):
    train, test = fixture_pair
    assert np.array_equal(train.concept_codes, test.concept_codes)
    assert np.array_equal(train.codebook, test.codebook)
    assert test.manifest.split == "test"
    assert train.manifest.sample_ids() == test.manifest.sample_ids()
    tid = train.manifest.triplets[0].target_id
    assert not np.array_equal(train.stacks[tid].data, test.stacks[tid].data)


def test_oracle_full_subset_zero_noise():
    data = generate_synthetic_dataset(SynthConfig(noise_sigma=0.0))
    assert oracle_nn_recall(data.stacks, data.manifest, [1, 2, 3, 4]) == 1.0


def test_oracle_full_subset_reference_noise(fixture_pair):
    train, test = fixture_pair
    assert oracle_nn_recall(train.stacks, train.manifest, [1, 2, 3, 4]) >= 0.95
    assert oracle_nn_recall(test.stacks, test.manifest, [1, 2, 3, 4]) >= 0.95


def test_oracle_single_layer_matches_share_count():
    # with 16 concepts over alphabet 4, one layer narrows to ~4 candidates
    recalls = []
    for seed in range(10):
        data = generate_synthetic_dataset(
            SynthConfig(num_layers=3, alphabet_size=4, num_concepts=16, group_size=1,
                        noise_sigma=0.05, seed=seed)
        )
        recalls.append(oracle_nn_recall(data.stacks, data.manifest, [1]))
    assert abs(float(np.mean(recalls)) - 0.25) <= 0.1


def test_oracle_monotone_in_subset_size():
    subsets = [[4], [3, 4], [2, 3, 4], [1, 2, 3, 4]]
    means = []
    for subset in subsets:
        vals = [
            oracle_nn_recall(d.stacks, d.manifest, subset)
            for d in (generate_synthetic_dataset(SynthConfig(seed=s)) for s in range(5))
        ]
        means.append(float(np.mean(vals)))
    for lo, hi in zip(means, means[1:]):
        assert hi >= lo - 0.02
    assert means[-1] > means[0]


def test_oracle_rejects_bad_subsets(fixture_pair):
    train, _ = fixture_pair
    with pytest.raises(ValueError):
        oracle_nn_recall(train.stacks, train.manifest, [])
    with pytest.raises(ValueError):
        oracle_nn_recall(train.stacks, train.manifest, [0])
    with pytest.raises(ValueError):
        oracle_nn_recall(train.stacks, train.manifest, [5])


def test_written_dataset_validates(tmp_path, fixture_pair):
    from pregen.stackio import load_manifest, store_for_manifest, validate_dataset

    train, _ = fixture_pair
    manifest_path = write_dataset(train, tmp_path)
    manifest = load_manifest(manifest_path)
    stats = validate_dataset(manifest, store_for_manifest(manifest_path))
    assert stats.ok
    assert stats.samples == 384
