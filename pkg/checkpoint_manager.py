"""
Checkpoint Manager
Binary checkpoint files for segmentor parameters, listing and cleanup
"""
import hashlib
import io
import json
import logging
import os
import struct
from collections import OrderedDict
from datetime import datetime
from typing import List, Optional, Tuple

import numpy as np

from autodiff import Tensor
from error_handler import CorruptFileError
from segmentor import SegmentorParams, param_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = b'ANYSEG-CKPT v1\n'
CHECKSUM_BYTES = 8


def checksum(data: bytes) -> bytes:
    """64-bit BLAKE2b digest"""
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def _tensor_records(params: SegmentorParams) -> bytes:
    buffer = io.BytesIO()
    for name, tensor in params.tensors.items():
        encoded = name.encode('utf-8')
        buffer.write(struct.pack('<H', len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack('<B', tensor.data.ndim))
        buffer.write(struct.pack(f'<{tensor.data.ndim}I', *tensor.shape))
        buffer.write(np.ascontiguousarray(tensor.data, dtype='<f4').tobytes())
    return buffer.getvalue()


def params_checksum(params: SegmentorParams) -> str:
    """Hex digest of the serialized parameter records (names, shapes and float32 values)"""
    return checksum(_tensor_records(params)).hex()


def serialize_checkpoint(params: SegmentorParams, metadata: Optional[dict] = None) -> bytes:
    meta = dict(metadata or {})
    meta.update(params.shape_config())
    meta['frozen'] = bool(params.frozen)
    meta['num_tensors'] = len(params.tensors)
    body = CHECKPOINT_HEADER + json.dumps(meta, sort_keys=True).encode('utf-8') + b'\n' + _tensor_records(params)
    return body + checksum(body)


def _read_exact(stream: io.BytesIO, size: int, what: str) -> bytes:
    chunk = stream.read(size)
    if len(chunk) != size:
        raise CorruptFileError(f"checkpoint truncated while reading {what}")
    return chunk


def deserialize_checkpoint(data: bytes) -> Tuple[SegmentorParams, dict]:
    if not data.startswith(CHECKPOINT_HEADER):
        raise CorruptFileError("not a checkpoint file (bad header line)")
    if len(data) < len(CHECKPOINT_HEADER) + CHECKSUM_BYTES:
        raise CorruptFileError("checkpoint truncated")
    body, digest = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if checksum(body) != digest:
        raise CorruptFileError("checkpoint checksum mismatch")

    stream = io.BytesIO(body[len(CHECKPOINT_HEADER):])
    try:
        meta = json.loads(stream.readline().decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"checkpoint metadata unreadable: {e}")

    missing = [k for k in ('channels', 'decoder_channels', 'num_classes', 'merge_factor', 'frozen') if k not in meta]
    if missing:
        raise CorruptFileError(f"checkpoint metadata lacks {missing}")
    expected = param_shapes(meta['channels'], meta['decoder_channels'], meta['num_classes'], meta['merge_factor'])
    if meta.get('num_tensors') != len(expected):
        raise CorruptFileError(f"checkpoint holds {meta.get('num_tensors')} tensors, expected {len(expected)}")

    tensors = OrderedDict()
    for expected_name, (expected_shape, _) in expected.items():
        (name_len,) = struct.unpack('<H', _read_exact(stream, 2, 'name length'))
        name = _read_exact(stream, name_len, 'name').decode('utf-8')
        (ndim,) = struct.unpack('<B', _read_exact(stream, 1, 'rank'))
        shape = struct.unpack(f'<{ndim}I', _read_exact(stream, 4 * ndim, 'shape'))
        if name != expected_name or tuple(shape) != tuple(expected_shape):
            raise CorruptFileError(f"unexpected tensor {name}{list(shape)}, expected {expected_name}{list(expected_shape)}")
        count = int(np.prod(shape))
        values = np.frombuffer(_read_exact(stream, 4 * count, name), dtype='<f4').astype(np.float32)
        tensors[name] = Tensor(values.reshape(shape), requires_grad=not meta['frozen'], name=name)
    if stream.read(1):
        raise CorruptFileError("trailing bytes after the last tensor record")

    params = SegmentorParams(tensors, meta['channels'], meta['decoder_channels'], meta['num_classes'],
                             meta['merge_factor'], frozen=meta['frozen'])
    if not params.all_finite():
        raise CorruptFileError("checkpoint contains non-finite parameters")
    return params, meta


def write_checkpoint(params: SegmentorParams, path: str, metadata: Optional[dict] = None) -> str:
    """Write atomically (temp file + rename) so a crash never leaves a half checkpoint"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    data = serialize_checkpoint(params, metadata)
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, 'wb') as f:
            f.write(data)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logger.info(f"Checkpoint written: {path} ({os.path.getsize(path) / 1024:.2f} KB)")
    return path


def read_checkpoint(path: str) -> Tuple[SegmentorParams, dict]:
    with open(path, 'rb') as f:
        data = f.read()
    try:
        return deserialize_checkpoint(data)
    except CorruptFileError as e:
        e.context.setdefault('path', path)
        raise


def file_checksum(path: str) -> str:
    """Digest stored in the checkpoint trailer"""
    with open(path, 'rb') as f:
        f.seek(-CHECKSUM_BYTES, os.SEEK_END)
        return f.read(CHECKSUM_BYTES).hex()


class CheckpointManager:
    """Manage checkpoints of one experiment output directory"""

    def __init__(self, checkpoint_dir: str = "checkpoints"):
        self.checkpoint_dir = checkpoint_dir

        # Create checkpoint directory if it doesn't exist
        os.makedirs(checkpoint_dir, exist_ok=True)

    def path_for(self, name: str) -> str:
        return os.path.join(self.checkpoint_dir, f"{name}.ckpt")

    def save_checkpoint(self, params: SegmentorParams, name: str, metadata: Optional[dict] = None) -> str:
        return write_checkpoint(params, self.path_for(name), metadata)

    def load_checkpoint(self, name_or_path: str) -> Tuple[SegmentorParams, dict]:
        path = name_or_path if os.path.exists(name_or_path) else self.path_for(name_or_path)
        return read_checkpoint(path)

    def list_checkpoints(self) -> List[dict]:
        """
        List all checkpoints in the directory

        Returns:
            List of checkpoint info dictionaries, newest first
        """
        checkpoints = []

        try:
            for filename in os.listdir(self.checkpoint_dir):
                if filename.endswith('.ckpt'):
                    filepath = os.path.join(self.checkpoint_dir, filename)
                    stat = os.stat(filepath)

                    checkpoints.append({
                        'filename': filename,
                        'path': filepath,
                        'size': stat.st_size,
                        'created': datetime.fromtimestamp(stat.st_mtime),
                        'checksum': file_checksum(filepath)
                    })

            checkpoints.sort(key=lambda x: (x['created'], x['filename']), reverse=True)

        except OSError as e:
            logger.error(f"Error listing checkpoints: {e}")

        return checkpoints

    def cleanup_old_checkpoints(self, keep_count: int = 10, protect: Tuple[str, ...] = ()) -> int:
        """
        Delete all but the newest keep_count checkpoints

        Args:
            keep_count: Always keep at least this many recent checkpoints
            protect: Filenames never deleted (e.g. the frozen teacher)

        Returns:
            Number of checkpoints deleted
        """
        checkpoints = self.list_checkpoints()
        if len(checkpoints) <= keep_count:
            logger.info(f"Only {len(checkpoints)} checkpoints, keeping all (min: {keep_count})")
            return 0

        deleted_count = 0
        for checkpoint in checkpoints[keep_count:]:
            if checkpoint['filename'] in protect:
                continue
            os.remove(checkpoint['path'])
            logger.info(f"Deleted old checkpoint: {checkpoint['filename']}")
            deleted_count += 1

        logger.info(f"Cleaned up {deleted_count} old checkpoints")
        return deleted_count

    def get_checkpoint_stats(self) -> dict:
        """Get checkpoint statistics"""
        checkpoints = self.list_checkpoints()
        total_size = sum(c['size'] for c in checkpoints)
        return {
            'total_checkpoints': len(checkpoints),
            'total_size': total_size,
            'total_size_kb': total_size / 1024,
            'newest_checkpoint': checkpoints[0]['filename'] if checkpoints else None
        }
