import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlcabs.errors import (BadMagic, DataError, DimensionMismatch, EmptyPositives, TruncatedFile,
                           UnknownId, VersionUnsupported)
from vlcabs.store import (GeometryMeta, Manifest, ManifestEntry, PairedBatch, read_container,
                          write_container, load_batch)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestContainer:
    def test_small_round_trip_bit_exact(self, tmp_path):
        m = np.array([[0.6, 0.8, 0.0]], np.float32)
        write_container(tmp_path / "a.vlce", m, ["row0"])
        data, ids = read_container(tmp_path / "a.vlce")
        assert data.tobytes() == m.tobytes() and ids == ["row0"]

    def test_layout(self, tmp_path):
        write_container(tmp_path / "a.vlce", np.array([[1.0, 2.0]], np.float32), ["é"])
        raw = (tmp_path / "a.vlce").read_bytes()
        assert raw[:4] == b"VLCE"
        assert struct.unpack_from("<HII", raw, 4) == (1, 1, 2)
        assert struct.unpack_from("<2f", raw, 14) == (1.0, 2.0)
        assert struct.unpack_from("<I", raw, 22) == (2,)
        assert raw[26:].decode("utf-8") == "é"

    def test_empty_id_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_container(tmp_path / "a.vlce", np.ones((1, 2), np.float32), [""])

    def test_id_count_mismatch(self, tmp_path):
        with pytest.raises(DimensionMismatch):
            write_container(tmp_path / "a.vlce", np.ones((2, 2), np.float32), ["a"])

    def test_large_rewrite_identical_hash(self, tmp_path, rng):
        m = rng.normal(size=(1369, 768)).astype(np.float32)
        ids = [f"p{k}" for k in range(1369)]
        write_container(tmp_path / "a.vlce", m, ids)
        data, ids2 = read_container(tmp_path / "a.vlce")
        write_container(tmp_path / "b.vlce", data, ids2)
        assert sha(tmp_path / "a.vlce") == sha(tmp_path / "b.vlce")
        np.testing.assert_array_equal(data, m)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BadMagic):
            read_container(tmp_path / "x")

    def test_truncated(self, tmp_path):
        write_container(tmp_path / "a.vlce", np.ones((4, 4), np.float32), list("abcd"))
        raw = (tmp_path / "a.vlce").read_bytes()
        (tmp_path / "t").write_bytes(raw[:30])
        with pytest.raises(TruncatedFile):
            read_container(tmp_path / "t")
        (tmp_path / "t2").write_bytes(raw[:-1])
        with pytest.raises(TruncatedFile):
            read_container(tmp_path / "t2")

    def test_version(self, tmp_path):
        write_container(tmp_path / "a.vlce", np.ones((1, 1), np.float32), ["a"])
        raw = bytearray((tmp_path / "a.vlce").read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        (tmp_path / "a.vlce").write_bytes(bytes(raw))
        with pytest.raises(VersionUnsupported):
            read_container(tmp_path / "a.vlce")

    @settings(max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
    def test_round_trip_property(self, tmp_path, m):
        write_container(tmp_path / "p.vlce", m, [f"r{k}" for k in range(m.shape[0])])
        data, _ = read_container(tmp_path / "p.vlce")
        assert data.tobytes() == m.tobytes()


def _tiny_manifest(tmp_path, counts, D=4, L=4, sentence_dim=None):
    rng = np.random.default_rng(0)
    entries, sids, rows = [], [], []
    for i, n in enumerate(counts):
        write_container(tmp_path / f"img{i}.vlce", rng.normal(size=(L + 1, D)).astype(np.float32),
                        [f"t{k}" for k in range(L + 1)])
        ids = [f"s{i}_{k}" for k in range(n)]
        sids += ids
        rows += [rng.normal(size=sentence_dim or D) for _ in ids]
        entries.append(ManifestEntry(f"img{i}", f"img{i}.vlce", ids, GeometryMeta.identity(28)))
    write_container(tmp_path / "s.vlce", np.array(rows, np.float32).reshape(len(rows), -1), sids)
    m = Manifest(tmp_path, D, entries, "s.vlce", {s: f"There is {s}" for s in sids})
    m.save()
    return Manifest.load(tmp_path)


class TestManifest:
    def test_counts(self, tmp_path):
        m = _tiny_manifest(tmp_path, (2, 3, 1, 2))
        batch = load_batch(m, m.image_ids)
        assert batch.num_sentences == 8
        assert [len(p) for p in batch.positives] == [2, 3, 1, 2]
        assert m.mean_positives() == 2.0

    def test_single(self, tmp_path):
        m = _tiny_manifest(tmp_path, (1,))
        assert load_batch(m, ["img0"]).num_sentences == 1

    def test_empty_positives(self, tmp_path):
        m = _tiny_manifest(tmp_path, (1, 0))
        with pytest.raises(EmptyPositives):
            load_batch(m, ["img0", "img1"])

    def test_unknown_id(self, tmp_path):
        m = _tiny_manifest(tmp_path, (1,))
        with pytest.raises(UnknownId):
            load_batch(m, ["nope"])

    def test_dimension_mismatch_rejected(self, tmp_path):
        m = _tiny_manifest(tmp_path, (1, 1), sentence_dim=5)
        with pytest.raises(DimensionMismatch):
            m.validate()

    def test_json_round_trip(self, tmp_path):
        m = _tiny_manifest(tmp_path, (2, 1))
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["version"] == 1 and doc["embedding_dim"] == 4
        assert Manifest.load(tmp_path / "manifest.json").to_dict() == m.to_dict()


class TestPairedBatch:
    def test_partition_enforced(self, rng):
        t = rng.normal(size=(2, 5, 3))
        s = rng.normal(size=(3, 3))
        b = PairedBatch.from_arrays(t, s, (2, 1))
        assert list(b.owners) == [0, 0, 1]
        with pytest.raises(DataError):
            PairedBatch(b.images, [[0, 1], [1]], b.sentences)
        with pytest.raises(EmptyPositives):
            PairedBatch(b.images, [[0, 1, 2], []], b.sentences)

    def test_non_square_patches(self, rng):
        with pytest.raises(DimensionMismatch):
            PairedBatch.from_arrays(rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 3)), (1,))


class TestGeometry:
    def test_padded_dims_and_crop(self):
        g = GeometryMeta(original_height=100, original_width=80, model_input_size=50, pad_left=10, pad_right=10)
        assert (g.padded_height, g.padded_width) == (100, 100)
        assert g.crop_box() == (0, 50, 5, 45)

    def test_negative_pad(self):
        with pytest.raises(DataError):
            GeometryMeta(10, 10, 10, pad_top=-1)
