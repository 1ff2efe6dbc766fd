from __future__ import annotations
from typing import Iterable, Optional

# CLI 종료 코드
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


class BparseError(Exception):
    """모든 파이프라인 오류의 공통 부모.

    stage: 오류가 발생한 단계 이름(prompt / mae / finetune / evaluate). 파이프라인이 채워 넣는다.
    """
    exit_code = EXIT_DATA

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


# =====================================================
# 설정/사용 오류 (exit 2)
# =====================================================

class ConfigError(BparseError, ValueError):
    exit_code = EXIT_CONFIG


class MisuseError(ConfigError):
    """단계 분리 위반 (예: 동결되지 않은 prompt branch 로 mask token 생성)."""


class TransferError(ConfigError):
    def __init__(self, offenders: Iterable[str], stage: Optional[str] = None):
        self.offenders = sorted(offenders)
        super().__init__("가중치 이전 실패: " + ", ".join(self.offenders), stage=stage)


# =====================================================
# 데이터 오류 (exit 3)
# =====================================================

class DataError(BparseError, ValueError):
    exit_code = EXIT_DATA


class DimensionError(DataError):
    pass


class DomainError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class VolumeFormatError(DataError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class ByteCountMismatchError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


class CheckpointError(DataError):
    """체크포인트 파일이 손상되었거나 헤더 항목이 형식에 맞지 않음."""


class UndefinedMetricError(BparseError):
    """빈 마스크에 대한 HD95. 0 과 구분되는 '정의되지 않음' 신호."""


# =====================================================
# 발산 (exit 4)
# =====================================================

class DivergenceError(BparseError, ArithmeticError):
    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, step: int, stage: Optional[str] = None):
        self.step = step
        super().__init__(f"{message} (step={step})", stage=stage)
