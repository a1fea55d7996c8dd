import numpy as np
import pytest

from iisan import backbone as bb
from iisan import cache
from iisan.errors import ConfigError, FormatError, InputError, NotFoundError, StalenessError, VersionError


def _cfg(**kw):
    base = dict(modality="text", layers=2, hidden_dim=8,
                vocab_or_patch_count=64, max_positions=16, seed=9)
    base.update(kw)
    return bb.EncoderConfig(**base)


def _random_rows(n, m, h, seed=0):
    rng = np.random.default_rng(seed)
    return [(i, rng.normal(size=(m, h)).astype(np.float32)) for i in range(n)]


def test_file_size_formula_thousand_items(tmp_path):
    path = tmp_path / "big.iisc"
    m, h = 7, 64
    summary = cache.write_cache(path, 0xBEEF, range(m), h, _random_rows(1000, m, h))
    assert summary.byte_size == cache.cache_file_size(1000, m, h)
    assert path.stat().st_size == summary.byte_size
    # payload portion alone: 1000 * (8 + 7*64*4) = 1_800_000
    assert summary.byte_size - cache.header_size(m) == 1_800_000


def test_roundtrip_with_all_layers_is_bit_exact(tmp_path):
    enc = bb.build_encoder(_cfg())
    path = tmp_path / "full.iisc"
    items = [4, 1, 9]
    cache.build_cache(enc, items, range(enc.cfg.layers + 1), path)
    store = cache.CacheStore(path, expected_fingerprint=enc.fingerprint)
    for item_id in items:
        direct = bb.encode_item(enc, bb.item_tokens(enc.cfg, item_id), item_id=item_id)
        cached = store.read_item(item_id)
        np.testing.assert_array_equal(cached.states, direct.states)
        assert cached.encoder_fingerprint == enc.fingerprint


def test_pruned_roundtrip_bit_exact(tmp_path):
    enc = bb.build_encoder(_cfg(layers=4))
    keep = [0, 2, 4]
    path = tmp_path / "pruned.iisc"
    cache.build_cache(enc, [11, 12], keep, path)
    store = cache.CacheStore(path)
    direct = bb.encode_item(enc, bb.item_tokens(enc.cfg, 12), item_id=12)
    np.testing.assert_array_equal(store.read_item(12).states, direct.states[keep])


def test_pruning_81_states_to_6_shrinks_payload_by_13_5(tmp_path):
    h = 64
    full = cache.write_cache(tmp_path / "full.iisc", 1, range(81), h, _random_rows(20, 81, h))
    pruned = cache.write_cache(tmp_path / "six.iisc", 1, [15, 28, 41, 54, 67, 80], h,
                               [(i, s[[15, 28, 41, 54, 67, 80]]) for i, s in _random_rows(20, 81, h)])
    payload_full = full.byte_size - cache.header_size(81) - 20 * 8
    payload_pruned = pruned.byte_size - cache.header_size(6) - 20 * 8
    assert payload_full / payload_pruned == 13.5


def test_payload_scales_linearly_with_kept_layers(tmp_path):
    h, n = 16, 50
    sizes = {}
    for m in (2, 4, 8):
        s = cache.write_cache(tmp_path / f"m{m}.iisc", 1, range(m), h, _random_rows(n, m, h))
        sizes[m] = s.byte_size - cache.header_size(m) - n * 8
    assert sizes[4] == 2 * sizes[2]
    assert sizes[8] == 4 * sizes[2]


def test_read_absent_item(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    store = cache.CacheStore(path)
    with pytest.raises(NotFoundError):
        store.read_item(999)


def test_wrong_fingerprint_is_stale(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    with pytest.raises(StalenessError):
        cache.CacheStore(path, expected_fingerprint=8)
    with pytest.raises(StalenessError):
        cache.read_item(cache.CacheStore(path), 0, expected_fingerprint=8)


def test_invalid_keep_layers_rejected(tmp_path):
    enc = bb.build_encoder(_cfg())
    with pytest.raises(ConfigError):
        cache.build_cache(enc, [1], [0, 0], tmp_path / "x.iisc")
    with pytest.raises(ConfigError):
        cache.build_cache(enc, [1], [0, 5], tmp_path / "x.iisc")
    with pytest.raises(InputError):
        cache.build_cache(enc, [], [0, 1], tmp_path / "x.iisc")


def test_verify_fresh_cache_clean(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1, 2], 8, _random_rows(200, 3, 8))
    report = cache.verify_cache(path)
    assert report.ok, report.issues
    assert report.item_count == 200


def test_verify_flipped_magic(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    report = cache.verify_cache(path)
    assert not report.ok
    assert any("magic" in issue for issue in report.issues)


def test_verify_count_mismatch(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])  # drop part of the last record
    report = cache.verify_cache(path)
    assert not report.ok
    assert any("mismatch" in issue for issue in report.issues)


def test_verify_flags_non_finite_payload(tmp_path):
    path = tmp_path / "c.iisc"
    rows = _random_rows(5, 2, 4)
    rows[0][1][0, 0] = np.nan  # first record is always in the 1% sample
    cache.write_cache(path, 7, [0, 1], 4, rows)
    report = cache.verify_cache(path)
    assert not report.ok
    assert any("non-finite" in issue for issue in report.issues)


def test_import_hidden_states_roundtrip(tmp_path):
    enc = bb.build_encoder(_cfg())
    path = tmp_path / "c.iisc"
    cache.build_cache(enc, [3, 1, 2], range(enc.cfg.layers + 1), path)
    stacks = list(bb.import_hidden_states(path))
    assert [s.item_id for s in stacks] == [1, 2, 3]  # file order is sorted ids
    for s in stacks:
        direct = bb.encode_item(enc, bb.item_tokens(enc.cfg, s.item_id))
        np.testing.assert_array_equal(s.states, direct.states)
        assert s.encoder_fingerprint == enc.fingerprint


def test_import_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError) as exc:
        list(bb.import_hidden_states(path))
    assert exc.value.offset is not None


def test_import_unknown_version(tmp_path):
    path = tmp_path / "c.iisc"
    cache.write_cache(path, 7, [0, 1], 4, _random_rows(3, 2, 4))
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field, little-endian u16 at offset 4
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        list(bb.import_hidden_states(path))
