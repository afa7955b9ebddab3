"""
Tests for checkpoint files and the checkpoint manager
"""
import os

import numpy as np
import pytest

from checkpoint_manager import (CheckpointManager, file_checksum, params_checksum, read_checkpoint,
                                serialize_checkpoint, write_checkpoint)
from error_handler import CorruptFileError
from segmentor import init_params


@pytest.fixture
def params():
    return init_params([4, 8, 8, 16], 8, 3, seed=5)


@pytest.fixture
def manager(tmp_path):
    return CheckpointManager(str(tmp_path / "runs"))


def _rewrite(path, transform):
    with open(path, 'rb') as f:
        data = f.read()
    with open(path, 'wb') as f:
        f.write(transform(data))


class TestCheckpointFile:

    def test_round_trip(self, params, manager):
        path = manager.save_checkpoint(params, 'student', {'role': 'student', 'seed': 5})
        loaded, meta = read_checkpoint(path)
        assert loaded.names() == params.names()
        for name in params.names():
            np.testing.assert_array_equal(loaded[name].data, params[name].data)
        assert meta['role'] == 'student'
        assert meta['channels'] == [4, 8, 8, 16]
        assert loaded.shape_config() == params.shape_config()
        assert params_checksum(loaded) == params_checksum(params)

    def test_file_starts_with_header(self, params):
        assert serialize_checkpoint(params).startswith(b'ANYSEG-CKPT v1\n')

    def test_frozen_flag_survives(self, params, manager):
        params.freeze()
        loaded, meta = manager.load_checkpoint(manager.save_checkpoint(params, 'teacher'))
        assert meta['frozen'] is True
        assert loaded.frozen
        assert not any(t.requires_grad for t in loaded.parameters())

    def test_load_by_name(self, params, manager):
        manager.save_checkpoint(params, 'teacher')
        loaded, _ = manager.load_checkpoint('teacher')
        assert params_checksum(loaded) == params_checksum(params)

    def test_checksum_changes_with_values(self, params):
        before = params_checksum(params)
        params['classifier.bias'].data[0, 0] += 1.0
        assert params_checksum(params) != before

    def test_trailer_is_body_digest(self, params, tmp_path):
        path = write_checkpoint(params, str(tmp_path / "a.ckpt"))
        with open(path, 'rb') as f:
            assert f.read()[-8:].hex() == file_checksum(path)

    def test_flipped_byte_is_rejected(self, params, tmp_path):
        path = write_checkpoint(params, str(tmp_path / "a.ckpt"))
        _rewrite(path, lambda data: data[:100] + bytes([data[100] ^ 0x01]) + data[101:])
        with pytest.raises(CorruptFileError) as info:
            read_checkpoint(path)
        assert info.value.context['path'] == path

    def test_truncated_file_is_rejected(self, params, tmp_path):
        path = write_checkpoint(params, str(tmp_path / "a.ckpt"))
        _rewrite(path, lambda data: data[:-20])
        with pytest.raises(CorruptFileError):
            read_checkpoint(path)

    def test_bad_header_is_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"ANYSEG-CKPT v2\n" + b"\x00" * 16)
        with pytest.raises(CorruptFileError):
            read_checkpoint(str(path))

    def test_non_finite_values_are_rejected(self, params, tmp_path):
        params['stage1.bias'].data[0, 0] = np.nan
        path = write_checkpoint(params, str(tmp_path / "nan.ckpt"))
        with pytest.raises(CorruptFileError):
            read_checkpoint(path)

    def test_write_is_atomic(self, params, tmp_path):
        write_checkpoint(params, str(tmp_path / "a.ckpt"))
        assert sorted(os.listdir(tmp_path)) == ["a.ckpt"]

    def test_failed_rename_removes_temp_file(self, params, tmp_path, monkeypatch):
        def refuse(src, dst):
            raise OSError("disk full")
        monkeypatch.setattr(os, 'replace', refuse)
        with pytest.raises(OSError):
            write_checkpoint(params, str(tmp_path / "a.ckpt"))
        assert os.listdir(tmp_path) == []

    def test_unencodable_metadata_leaves_nothing(self, params, tmp_path):
        with pytest.raises(TypeError):
            write_checkpoint(params, str(tmp_path / "a.ckpt"), {'when': object()})
        assert os.listdir(tmp_path) == []


class TestCheckpointManager:

    def _save_aged(self, manager, params, names):
        for age, name in enumerate(names):
            path = manager.save_checkpoint(params, name)
            stamp = 1_700_000_000 - 100 * age
            os.utime(path, (stamp, stamp))

    def test_list_newest_first(self, params, manager):
        self._save_aged(manager, params, ['c', 'b', 'a'])
        assert [c['filename'] for c in manager.list_checkpoints()] == ['c.ckpt', 'b.ckpt', 'a.ckpt']

    def test_cleanup_keeps_newest_and_protected(self, params, manager):
        self._save_aged(manager, params, ['s3', 's2', 's1', 'teacher'])
        deleted = manager.cleanup_old_checkpoints(keep_count=1, protect=('teacher.ckpt',))
        assert deleted == 2
        assert sorted(c['filename'] for c in manager.list_checkpoints()) == ['s3.ckpt', 'teacher.ckpt']

    def test_cleanup_below_limit(self, params, manager):
        self._save_aged(manager, params, ['a'])
        assert manager.cleanup_old_checkpoints(keep_count=5) == 0

    def test_stats(self, params, manager):
        self._save_aged(manager, params, ['new', 'old'])
        stats = manager.get_checkpoint_stats()
        assert stats['total_checkpoints'] == 2
        assert stats['newest_checkpoint'] == 'new.ckpt'
        assert stats['total_size'] > 0
