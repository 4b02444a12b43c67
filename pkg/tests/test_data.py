import logging

import numpy as np
import pytest

from semrec import data as D


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_interactions_format_dedup_and_drop(tmp_path, caplog):
    p = write(tmp_path, "x.txt", "u1 a b c d\nu2 a a b c\nu3 a b\n")
    with caplog.at_level(logging.INFO, logger="semrec.data"):
        ds = D.load_interactions(p)
    seqs = ds.sequences()
    assert seqs["u1"] == ("a", "b", "c", "d")
    assert seqs["u2"] == ("a", "b", "c")
    assert "u3" not in seqs and ds.dropped_users == 1
    assert "dropped 1 users" in caplog.text


def test_dedup_can_push_user_below_minimum(tmp_path):
    ds = D.load_interactions(write(tmp_path, "x.txt", "u1 a a b\nu2 a b c\n"))
    assert list(ds.sequences()) == ["u2"] and ds.dropped_users == 1


def test_malformed_line_reports_line_number(tmp_path):
    p = write(tmp_path, "x.txt", "u1 a b c\nlonely\n")
    with pytest.raises(D.DataError, match=r"x\.txt:2"):
        D.load_interactions(p)


def test_empty_dataset_is_fatal(tmp_path):
    with pytest.raises(D.DataError, match="empty"):
        D.load_interactions(write(tmp_path, "x.txt", "u1 a b\n"))


def test_dataset_invariants_enforced():
    with pytest.raises(D.DataError, match="unknown items"):
        D.InteractionDataset((("u", ("a", "b", "c")),), frozenset({"a", "b"}))
    with pytest.raises(D.DataError, match="interactions"):
        D.InteractionDataset((("u", ("a", "b")),), frozenset({"a", "b"}))


def test_interactions_round_trip(tmp_path):
    ds = D.synth_generate(D.SynthConfig(n_users=50, n_items=40, n_concepts=4)).dataset
    D.write_interactions(ds, tmp_path / "i.txt")
    back = D.load_interactions(tmp_path / "i.txt")
    assert back.users == ds.users


def test_leave_one_out_split():
    ds = D.InteractionDataset.from_sequences({"u": list("abcd"), "v": list("abc")})
    split = D.leave_one_out_split(ds)
    u, v = split.users
    assert (u.train, u.val, u.test) == (("a", "b"), "c", "d")
    assert (v.train, v.val, v.test) == (("a",), "b", "c")
    assert split.history(u, "val") == ("a", "b")
    assert split.history(u, "test") == ("a", "b", "c")
    assert split.target(u, "test") == "d"


def test_split_recombines_to_original():
    ds = D.synth_generate(D.SynthConfig(n_users=200, n_items=60, n_concepts=6)).dataset
    split = D.leave_one_out_split(ds)
    seqs = ds.sequences()
    for s in split.users:
        assert s.train + (s.val, s.test) == seqs[s.user_id]


def feature_file(tmp_path, body, dims="text=2 image=2", encoding="text"):
    header = f"{D.VECTOR_MAGIC}\ncount {len(body)}\ndims {dims}\nencoding {encoding}\nend\n"
    return write(tmp_path, "f.vec", header + "\n".join(body) + "\n")


def test_features_are_l2_normalized(tmp_path):
    feats = D.load_features(feature_file(tmp_path, ["x\t3 4\t0 2"]))
    np.testing.assert_allclose(feats["x"].text_vec, [0.6, 0.8])
    np.testing.assert_allclose(feats["x"].image_vec, [0.0, 1.0])


def test_zero_vector_becomes_uniform_with_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="semrec.data"):
        feats = D.load_features(feature_file(tmp_path, ["x\t0 0\t1 0"]))
    np.testing.assert_allclose(feats["x"].text_vec, [2 ** -0.5] * 2)
    assert "zero text" in caplog.text


def test_missing_modality_rejected_or_mean_substituted(tmp_path):
    p = feature_file(tmp_path, ["x\t1 0\t1 0", "y\t0 1\tNA", "z\t1 1\t0 1"])
    with pytest.raises(D.DataError, match="missing image"):
        D.load_features(p)
    feats = D.load_features(p, allow_missing=True)
    expect = np.array([0.5, 0.5]) / np.linalg.norm([0.5, 0.5])
    np.testing.assert_allclose(feats["y"].image_vec, expect)


def test_dimension_mismatch_is_parse_error(tmp_path):
    with pytest.raises(D.DataError, match=r"f\.vec:6.*text has 3 values"):
        D.load_features(feature_file(tmp_path, ["x\t1 2 3\t1 0"]))


def test_missing_features_for_items_is_fatal():
    ds = D.InteractionDataset.from_sequences({"u": list("abc")})
    feats = {"a": D.ItemFeatures("a", np.ones(2), np.ones(2))}
    with pytest.raises(D.DataError, match=r"\['b', 'c'\]"):
        D.check_coverage(ds, feats)


@pytest.mark.parametrize("encoding", ["text", "binary"])
def test_vector_file_round_trip(tmp_path, encoding):
    rng = np.random.default_rng(3)
    ids = [f"i{k}" for k in range(7)]
    blocks = {"text": rng.standard_normal((7, 3)), "image": rng.standard_normal((7, 5)),
              "struct": rng.standard_normal((7, 2))}
    blocks["image"][4] = np.nan
    D.write_vectors(tmp_path / "v.vec", ids, blocks, encoding)
    back_ids, back = D.read_vectors(tmp_path / "v.vec")
    assert back_ids == ids
    for k, m in blocks.items():
        expect = m.astype(np.float32).astype(np.float64) if encoding == "binary" else m
        np.testing.assert_array_equal(back[k], expect)


def test_struct_modality_is_optional_third_channel(tmp_path):
    synth = D.synth_generate(D.SynthConfig(n_users=20, n_items=12, n_concepts=3, feature_dims=(4, 4, 3)))
    D.write_features(synth.features, tmp_path / "f.vec")
    back = D.load_features(tmp_path / "f.vec")
    assert len(back["i0000"].modalities()) == 3
    assert back["i0000"].struct_vec.shape == (3,)


def test_synth_zero_noise_gives_identical_vectors_per_concept():
    s = D.synth_generate(D.SynthConfig(n_users=30, n_items=40, n_concepts=4, concept_noise_sigma=0.0))
    by_concept = {}
    for iid, c in s.concepts.items():
        by_concept.setdefault(c, []).append(s.features[iid].text_vec)
    for vecs in by_concept.values():
        np.testing.assert_allclose(np.stack(vecs), np.broadcast_to(vecs[0], (len(vecs), len(vecs[0]))))


def test_synth_full_stickiness_stays_in_one_concept():
    s = D.synth_generate(D.SynthConfig(n_users=100, n_items=60, n_concepts=6, markov_stickiness=1.0))
    for _, items in s.dataset.users:
        assert len({s.concepts[i] for i in items}) == 1


def test_synth_defaults_recover_concepts_by_nearest_centroid():
    s = D.synth_generate(D.SynthConfig())
    assert len(s.features) == 500 and len(s.dataset) <= 2000
    assert D.nearest_centroid_accuracy(s) >= 0.99
    within, across = D.concept_similarity_gap(s)
    assert within > across
    lengths = [len(items) for _, items in s.dataset.users]
    assert 6.0 <= np.mean(lengths) <= 10.0


def test_synth_is_bit_deterministic(tmp_path):
    a = D.synth_generate(D.SynthConfig(n_users=80, n_items=50, n_concepts=5, seed=11))
    b = D.synth_generate(D.SynthConfig(n_users=80, n_items=50, n_concepts=5, seed=11))
    assert a.dataset.users == b.dataset.users
    D.write_features(a.features, tmp_path / "a.vec")
    D.write_features(b.features, tmp_path / "b.vec")
    assert (tmp_path / "a.vec").read_bytes() == (tmp_path / "b.vec").read_bytes()


@pytest.mark.parametrize("bad", [{"markov_stickiness": 1.5}, {"n_concepts": 600}, {"seq_len_range": (2, 5)}])
def test_synth_config_validation(bad):
    with pytest.raises(D.DataError):
        D.SynthConfig(**bad).validate()


def test_transfer_domains_share_concepts_but_not_ids():
    target, sources = D.synth_transfer(D.SynthConfig(n_users=40, n_items=30, n_concepts=3), 2)
    assert len(sources) == 2
    ids = [set(target.features)] + [set(s.features) for s in sources]
    assert not ids[0] & ids[1] and not ids[1] & ids[2]
    for s in sources:
        for a, b in zip(s.centroids, target.centroids):
            np.testing.assert_array_equal(a, b)


def test_heterogeneous_noise_spread():
    s = D.synth_generate(D.SynthConfig(n_users=20, n_items=200, n_concepts=4, noise_spread=3.0))
    sig = np.array(list(s.noise.values()))
    assert sig.min() < 0.05 and sig.max() > 0.2
