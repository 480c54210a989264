from dataclasses import dataclass
from typing import Tuple


# CLASSES FOR CONSTANTS
@dataclass
class Theme:
    # index 0 is unlabeled; indices 1..16 follow the usual land-cover map colors
    MAP_PALETTE: Tuple[Tuple[int, int, int], ...] = (
        (0, 0, 0),
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
        (0, 255, 255),
        (255, 0, 255),
        (176, 48, 96),
        (46, 139, 87),
        (160, 32, 240),
        (255, 127, 80),
        (127, 255, 212),
        (218, 112, 214),
        (160, 82, 45),
        (127, 255, 0),
        (216, 191, 216),
        (238, 0, 0),
    )
    GUTTER_COLOR = (255, 255, 255)
    SUCCESS_PREFIX = "sdhsi"
    ERROR_PREFIX = "sdhsi-error"


@dataclass
class Sizes:
    PANEL_GUTTER = 2
    TABLE_PADDING = 2
    METRIC_DECIMALS = 2
    KAPPA_DECIMALS = 4


@dataclass
class Layout:
    # per-head table order: S1, S2, Teacher
    HEAD_COLUMNS = ("s1", "s2", "teacher")
    HEAD_TITLES = {"s1": "S1", "s2": "S2", "teacher": "Teacher"}
    MAP_FILES = ("gt", "s1", "s2", "teacher")
