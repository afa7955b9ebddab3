"""
Input Validation Utilities
Shared (is_valid, error_message) checks for configs, CLI arguments and data
"""
import math
import re
from typing import Dict, List, Optional, Sequence, Tuple

KNOWN_MODALITIES = ('R', 'F', 'D', 'E', 'L')
TOGGLE_NAMES = ('sup', 'mad', 'umd', 'cmd', 'fused-kd')


class InputValidator:
    """Input validation for experiment configs and command-line values"""

    # Hard limits for desk-scale runs
    MAX_CLASSES = 256
    MAX_IMAGE_SIZE = 1024
    MAX_SEED = 2 ** 64 - 1
    SPATIAL_DIVISOR = 16

    @staticmethod
    def validate_integer(value, min_val: int = None, max_val: int = None,
                         name: str = "value") -> Tuple[bool, Optional[str], Optional[int]]:
        """
        Validate integer input
        Returns: (is_valid, error_message, parsed_value)
        """
        try:
            if isinstance(value, bool):
                raise TypeError(value)
            parsed = int(value)
            if isinstance(value, float) and parsed != value:
                raise ValueError(value)

            if min_val is not None and parsed < min_val:
                return False, f"{name} must be >= {min_val}, got {parsed}", None

            if max_val is not None and parsed > max_val:
                return False, f"{name} must be <= {max_val}, got {parsed}", None

            return True, None, parsed

        except (ValueError, TypeError):
            return False, f"{name} must be an integer, got {value!r}", None

    @staticmethod
    def validate_float(value, min_val: float = None, max_val: float = None, name: str = "value",
                       allow_min: bool = True) -> Tuple[bool, Optional[str]]:
        """
        Validate a finite float within bounds
        Returns: (is_valid, error_message)
        """
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False, f"{name} must be a number, got {value!r}"
        if not math.isfinite(value):
            return False, f"{name} must be finite, got {value}"
        if min_val is not None and (value < min_val or (not allow_min and value == min_val)):
            bound = '>=' if allow_min else '>'
            return False, f"{name} must be {bound} {min_val}, got {value}"
        if max_val is not None and value > max_val:
            return False, f"{name} must be <= {max_val}, got {value}"
        return True, None

    @staticmethod
    def validate_modalities(modalities: Sequence[str]) -> Tuple[bool, Optional[str]]:
        """Non-empty, duplicate-free subset of the known modality kinds"""
        if not modalities:
            return False, "at least one modality is required"
        unknown = [m for m in modalities if m not in KNOWN_MODALITIES]
        if unknown:
            return False, f"unknown modalities {unknown}, expected a subset of {list(KNOWN_MODALITIES)}"
        if len(set(modalities)) != len(modalities):
            return False, f"duplicate modality in {list(modalities)}"
        return True, None

    @staticmethod
    def validate_channels(channels: Sequence[int]) -> Tuple[bool, Optional[str]]:
        """Exactly four positive stage widths"""
        if len(channels) != 4:
            return False, f"CHANNELS needs exactly 4 stage widths, got {len(channels)}"
        if any(c <= 0 for c in channels):
            return False, f"stage widths must be positive, got {list(channels)}"
        return True, None

    @staticmethod
    def validate_image_size(size: int, merge_factor: int) -> Tuple[bool, Optional[str]]:
        """Scenes must survive four patch-merges and the 16-pixel generator grid"""
        if size <= 0 or size > InputValidator.MAX_IMAGE_SIZE:
            return False, f"IMAGE_SIZE must be in [1, {InputValidator.MAX_IMAGE_SIZE}], got {size}"
        divisor = max(merge_factor ** 4, InputValidator.SPATIAL_DIVISOR)
        if size % divisor:
            return False, f"IMAGE_SIZE {size} must be divisible by {divisor}"
        return True, None

    @staticmethod
    def validate_num_classes(num_classes: int, size: int) -> Tuple[bool, Optional[str]]:
        if not 2 <= num_classes <= InputValidator.MAX_CLASSES:
            return False, f"NUM_CLASSES must be in [2, {InputValidator.MAX_CLASSES}], got {num_classes}"
        if num_classes > size * size:
            return False, f"NUM_CLASSES {num_classes} exceeds the {size * size} pixels of a scene"
        return True, None

    @staticmethod
    def validate_path(path: str, name: str = "path") -> Tuple[bool, Optional[str]]:
        if not path or not isinstance(path, str) or not path.strip():
            return False, f"{name} is empty"
        if '\x00' in path:
            return False, f"{name} contains a null byte"
        return True, None

    @staticmethod
    def parse_toggles(text: str) -> Tuple[bool, Optional[str], Optional[Dict[str, bool]]]:
        """
        Parse a comma-separated list of enabled loss terms, e.g. "sup,mad,umd"
        Returns: (is_valid, error_message, toggles)
        """
        names = [t.strip().lower().replace('_', '-') for t in (text or '').split(',') if t.strip()]
        unknown = [n for n in names if n not in TOGGLE_NAMES]
        if unknown:
            return False, f"unknown loss toggles {unknown}, expected any of {list(TOGGLE_NAMES)}", None
        toggles = {
            'mad': 'mad' in names,
            'umd': 'umd' in names,
            'cmd': 'cmd' in names,
            'fused_kd': 'fused-kd' in names,
        }
        return True, None, toggles

    @staticmethod
    def parse_number_list(text: str, name: str = "values") -> Tuple[bool, Optional[str], Optional[List[float]]]:
        """
        Parse "0,1,3.5" into floats
        Returns: (is_valid, error_message, values)
        """
        parts = [p.strip() for p in (text or '').split(',') if p.strip()]
        if not parts:
            return False, f"{name} is empty", None
        values = []
        for part in parts:
            if not re.match(r'^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$', part):
                return False, f"{name}: '{part}' is not a number", None
            values.append(float(part))
        return True, None, values
