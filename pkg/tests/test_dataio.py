import dataclasses
import struct

import numpy as np
import pytest
from scipy.stats import spearmanr

import fpl
from fpl.dataio import (
    FeaturePack,
    ShiftSpec,
    SynthSpec,
    domain_shift,
    gen_synthetic,
    pack_from_bytes,
    pack_hash,
    pack_to_bytes,
    read_pack,
    write_pack,
)
from fpl.errors import (
    BadMagic,
    ManifestMismatch,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)


@pytest.fixture
def small_pack():
    return gen_synthetic(SynthSpec(d=3, n=2, h=2, w=2, c=5, c_t=6,
                                   noise_sigma=0.2, queries_per_class=3, seed=11))


def tensors_of(pack):
    yield pack.text_features
    for maps in pack.support:
        for m in maps:
            yield m.values
    for q in pack.queries:
        yield q.feature_map.values
        yield q.global_feature


class TestRoundTrip:
    def test_bitwise_lossless(self, small_pack, tmp_path):
        path = tmp_path / "pack.fpk"
        write_pack(small_pack, path)
        back = read_pack(path)
        for a, b in zip(tensors_of(small_pack), tensors_of(back)):
            assert np.array_equal(a, b)
        assert back.class_names == small_pack.class_names
        assert back.prompt_template == small_pack.prompt_template
        assert back.tau == small_pack.tau
        assert back.normalize_locations == small_pack.normalize_locations
        assert [q.label for q in back.queries] == [q.label for q in small_pack.queries]
        assert [q.split for q in back.queries] == [q.split for q in small_pack.queries]

    def test_serialization_deterministic(self, small_pack):
        assert pack_to_bytes(small_pack) == pack_to_bytes(small_pack)
        assert pack_hash(small_pack) == pack_hash(small_pack)

    def test_write_read_write_stable(self, small_pack, tmp_path):
        path = tmp_path / "pack.fpk"
        write_pack(small_pack, path)
        data1 = path.read_bytes()
        write_pack(read_pack(path), path)
        assert path.read_bytes() == data1


class TestFileFormat:
    def test_header_layout(self, small_pack):
        data = pack_to_bytes(small_pack)
        assert data[0:4] == b"FPK1"
        assert struct.unpack("<I", data[4:8])[0] == 1
        mlen = struct.unpack("<Q", data[8:16])[0]
        manifest = data[16:16 + mlen].decode("utf-8")
        import json

        man = json.loads(manifest)
        assert set(man) == {"class_names", "prompt_template", "tau", "dims",
                            "normalize_locations", "blobs"}
        assert set(man["dims"]) == {"H", "W", "C", "C_t"}
        kinds = {b["kind"] for b in man["blobs"]}
        assert kinds == {"text", "support", "query_map", "query_global",
                         "labels", "splits"}
        # Blobs contiguous, in order, ending at the file end.
        spans = sorted((b["offset"], b["offset"] + b["byte_len"])
                       for b in man["blobs"])
        assert spans[0][0] == 16 + mlen
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            assert b0 == a1
        assert spans[-1][1] == len(data)

    def test_bad_magic(self, small_pack):
        data = bytearray(pack_to_bytes(small_pack))
        data[0:4] = b"XXXX"
        with pytest.raises(BadMagic):
            pack_from_bytes(bytes(data))

    def test_unsupported_version(self, small_pack):
        data = bytearray(pack_to_bytes(small_pack))
        data[4:8] = struct.pack("<I", 9)
        with pytest.raises(UnsupportedVersion):
            pack_from_bytes(bytes(data))

    def test_truncated(self, small_pack):
        data = pack_to_bytes(small_pack)
        with pytest.raises(TruncatedFile):
            pack_from_bytes(data[: len(data) - 7])
        with pytest.raises(TruncatedFile):
            pack_from_bytes(data[:10])

    def test_manifest_support_count_mismatch(self, small_pack):
        # Drop one support blob from the manifest: 3 classes, 2 blobs.
        import json

        data = pack_to_bytes(small_pack)
        mlen = struct.unpack("<Q", data[8:16])[0]
        man = json.loads(data[16:16 + mlen])
        man["blobs"] = [b for b in man["blobs"]
                        if not (b["kind"] == "support" and b.get("class_id") == 2)]
        new_manifest = json.dumps(man, separators=(",", ":")).encode()
        patched = (data[:8] + struct.pack("<Q", len(new_manifest))
                   + new_manifest + data[16 + mlen:])
        # Offsets in the patched manifest no longer line up exactly, but the
        # support-count check fires first.
        with pytest.raises(ManifestMismatch):
            pack_from_bytes(patched)

    def test_shape_bytelen_mismatch(self, small_pack):
        import json

        data = pack_to_bytes(small_pack)
        mlen = struct.unpack("<Q", data[8:16])[0]
        man = json.loads(data[16:16 + mlen])
        for b in man["blobs"]:
            if b["kind"] == "text":
                b["shape"][0] += 1
        new_manifest = json.dumps(man, separators=(",", ":")).encode()
        pad = b" " * (mlen - len(new_manifest))
        with pytest.raises(ManifestMismatch):
            pack_from_bytes(data[:16] + new_manifest + pad + data[16 + mlen:])


class TestGenSynthetic:
    def test_deterministic(self):
        spec = SynthSpec(d=3, n=2, h=1, w=2, c=4, c_t=5, seed=9)
        p1, p2 = gen_synthetic(spec), gen_synthetic(spec)
        assert pack_to_bytes(p1) == pack_to_bytes(p2)

    def test_zero_noise_separable(self):
        spec = SynthSpec(d=4, n=2, h=2, w=2, c=8, c_t=8, noise_sigma=0.0,
                         queries_per_class=5, seed=3)
        pack = gen_synthetic(spec)
        state = fpl.train(pack, fpl.HyperParams(epochs=1))
        report = fpl.evaluate(pack, state, fpl.HyperParams())
        assert report.overall_accuracy == 1.0

    def test_supports_are_train_queries(self):
        spec = SynthSpec(d=2, n=3, h=1, w=1, c=4, c_t=4, seed=5)
        pack = gen_synthetic(spec)
        train = pack.queries_for_split("train")
        assert len(train) == 6
        for q in train:
            found = any(
                np.array_equal(q.feature_map.values, m.values)
                for m in pack.support[q.label]
            )
            assert found

    def test_unit_rows_when_normalized(self):
        pack = gen_synthetic(SynthSpec(d=2, n=2, h=2, w=2, c=6, c_t=6,
                                       noise_sigma=0.5, seed=1))
        for maps in pack.support:
            for m in maps:
                assert np.abs(np.linalg.norm(m.values, axis=1) - 1).max() < 1e-4

    def test_text_features_unit_and_correlated(self):
        pack = gen_synthetic(SynthSpec(d=4, n=1, h=1, w=1, c=4, c_t=12, seed=2))
        norms = np.linalg.norm(pack.text_features, axis=1)
        assert np.abs(norms - 1).max() < 1e-4

    def test_trained_beats_nearest_class_mean(self):
        # Frozen benchmark: crowded map space plus an informative zero-shot
        # signal that the class-mean baseline cannot use.
        spec = SynthSpec(d=5, n=4, h=2, w=2, c=3, c_t=16, class_separation=1.0,
                         noise_sigma=0.3, queries_per_class=20, seed=7)
        pack = gen_synthetic(spec)
        hp = fpl.HyperParams(lr=0.5, epochs=20, batch_size=4, seed=7)
        state = fpl.train(pack, hp)
        fpl_acc = fpl.evaluate(pack, state, hp).overall_accuracy
        ncm_acc = fpl.baseline_nearest_class_mean(pack).overall_accuracy
        assert fpl_acc > ncm_acc
        assert ncm_acc == pytest.approx(0.95, abs=0.03)
        assert fpl_acc == pytest.approx(0.99, abs=0.03)

    def test_accuracy_monotone_in_separation(self):
        separations = [0.2, 0.5, 1.0, 2.0]
        means = []
        for sep in separations:
            accs = []
            for seed in range(10):
                spec = SynthSpec(d=4, n=4, h=2, w=2, c=8, c_t=8,
                                 class_separation=sep, noise_sigma=0.4,
                                 queries_per_class=10, seed=seed,
                                 zero_shot_cluster=0.1,
                                 normalize_locations=False)
                pack = gen_synthetic(spec)
                hp = fpl.HyperParams(lr=0.3, epochs=15, batch_size=4, seed=seed)
                state = fpl.train(pack, hp)
                accs.append(fpl.evaluate(pack, state, hp).overall_accuracy)
            means.append(np.mean(accs))
        rho, _ = spearmanr(separations, means)
        assert rho > 0

    def test_invalid_spec(self):
        with pytest.raises(ShapeMismatch):
            SynthSpec(d=1)
        with pytest.raises(ShapeMismatch):
            SynthSpec(noise_sigma=-0.1)


class TestDomainShift:
    def test_identity_shift(self, small_pack):
        shifted = domain_shift(small_pack, ShiftSpec(0.0, 0.0, seed=1))
        for q0, q1 in zip(small_pack.queries, shifted.queries):
            assert np.array_equal(q0.feature_map.values, q1.feature_map.values)
            assert np.array_equal(q0.global_feature, q1.global_feature)

    def test_supports_and_text_untouched(self, small_pack):
        shifted = domain_shift(small_pack, ShiftSpec(0.7, 0.5, seed=2))
        assert np.array_equal(shifted.text_features, small_pack.text_features)
        for m0, m1 in zip(small_pack.support[0], shifted.support[0]):
            assert np.array_equal(m0.values, m1.values)

    def test_deterministic(self, small_pack):
        a = domain_shift(small_pack, ShiftSpec(0.5, 0.3, seed=7))
        b = domain_shift(small_pack, ShiftSpec(0.5, 0.3, seed=7))
        assert pack_to_bytes(a) == pack_to_bytes(b)

    def test_accepts_dict(self, small_pack):
        a = domain_shift(small_pack, {"rotation_strength": 0.2, "noise_add": 0.1,
                                      "seed": 3})
        b = domain_shift(small_pack, ShiftSpec(0.2, 0.1, 3))
        assert pack_to_bytes(a) == pack_to_bytes(b)

    def test_huge_noise_collapses_to_chance(self):
        accs = []
        for seed in range(5):
            spec = SynthSpec(d=5, n=2, h=2, w=2, c=8, c_t=8, noise_sigma=0.1,
                             queries_per_class=10, seed=seed)
            pack = gen_synthetic(spec)
            shifted = domain_shift(pack, ShiftSpec(0.0, 10.0, seed=seed))
            state = fpl.train(pack, fpl.HyperParams(epochs=1, lr=0.0))
            accs.append(fpl.evaluate(shifted, state, fpl.HyperParams()).overall_accuracy)
        assert abs(np.mean(accs) - 0.2) < 0.05

    def test_rotation_preserves_row_norms(self, small_pack):
        shifted = domain_shift(small_pack, ShiftSpec(1.3, 0.0, seed=4))
        for q in shifted.queries:
            norms = np.linalg.norm(q.feature_map.values, axis=1)
            assert np.abs(norms - 1).max() < 1e-4


class TestFeaturePackValidation:
    def test_normalized_pack_rejects_raw_rows(self, small_pack):
        bad_map = dataclasses.replace(
            small_pack.queries[0].feature_map,
            values=small_pack.queries[0].feature_map.values * 3.0,
        )
        queries = list(small_pack.queries)
        queries[0] = dataclasses.replace(queries[0], feature_map=bad_map)
        with pytest.raises(ManifestMismatch):
            dataclasses.replace(small_pack, queries=queries)

    def test_needs_two_classes(self, small_pack):
        with pytest.raises(ShapeMismatch):
            FeaturePack(
                class_names=["only"],
                prompt_template="x {}",
                tau=0.01,
                text_features=small_pack.text_features[:1],
                support=small_pack.support[:1],
                queries=[],
            )
