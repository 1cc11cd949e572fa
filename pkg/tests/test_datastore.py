import json

import numpy as np
import pytest

from ccnp_lab.datagen import FunctionFamilySpec, GPKernelSpec, LVSampler, make_meta_dataset
from ccnp_lab.datastore import (
    CacheFormatError,
    cache_exists,
    decode_instantiations,
    encode_instantiations,
    load_dataset,
    save_dataset,
)


def assert_same(a, b):
    for sa, sb in zip(a.splits().values(), b.splits().values()):
        assert len(sa) == len(sb)
        for ia, ib in zip(sa, sb):
            assert ia.x.tobytes() == ib.x.tobytes()
            assert ia.y.tobytes() == ib.y.tobytes()
            assert ia.coeffs == ib.coeffs and ia.family_id == ib.family_id


class TestRoundTrip:
    @pytest.mark.parametrize("spec", [FunctionFamilySpec("sinusoid"), GPKernelSpec("matern"), LVSampler()],
                             ids=["sinusoid", "gp", "lv"])
    def test_bit_exact(self, tmp_path, spec):
        ds = make_meta_dataset(spec, 22, rng_seed=5, n_points=30)
        save_dataset(ds, tmp_path, "d")
        assert cache_exists(tmp_path, "d")
        assert_same(ds, load_dataset(tmp_path, "d"))

    def test_regeneration_matches_cache(self, tmp_path):
        spec = FunctionFamilySpec("oscillator")
        save_dataset(make_meta_dataset(spec, 33, rng_seed=2), tmp_path, "a")
        save_dataset(make_meta_dataset(spec, 33, rng_seed=2), tmp_path, "b")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_missing_cache(self, tmp_path):
        assert not cache_exists(tmp_path, "nothing")


class TestCorruption:
    @pytest.fixture
    def blob(self):
        ds = make_meta_dataset(FunctionFamilySpec("line"), 11, n_points=5)
        return encode_instantiations(ds.train)

    def test_bad_magic(self, blob):
        with pytest.raises(CacheFormatError, match="magic"):
            decode_instantiations(b"XXXXXXXX" + blob[8:])

    def test_truncated(self, blob):
        with pytest.raises(CacheFormatError, match="truncated"):
            decode_instantiations(blob[:-3])
        with pytest.raises(CacheFormatError, match="truncated"):
            decode_instantiations(blob[:4])

    def test_trailing_bytes(self, blob):
        with pytest.raises(CacheFormatError, match="trailing"):
            decode_instantiations(blob + b"\0")

    def test_sidecar_split_mismatch(self, tmp_path):
        save_dataset(make_meta_dataset(FunctionFamilySpec("line"), 11, n_points=5), tmp_path, "d")
        meta_path = tmp_path / "d.meta.json"
        meta = json.loads(meta_path.read_text())
        meta["splits"]["train"] += 1
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(CacheFormatError, match="split sizes"):
            load_dataset(tmp_path, "d")
