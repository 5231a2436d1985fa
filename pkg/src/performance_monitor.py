"""
Stage timing for laboratory runs
Tracks wall-clock duration of FP solves, (N, M) cells and transport work
"""

import logging
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from functools import wraps
from typing import Any, Dict, List, Optional


@dataclass
class StageMetrics:
    """Metrics for a single stage execution"""
    stage_id: str
    stage_type: str  # 'fp-reference', 'coupled-cell', 'transport', ...
    start_time: datetime
    end_time: Optional[datetime] = None
    duration_seconds: Optional[float] = None
    success: bool = True
    error_message: Optional[str] = None
    _clock: float = 0.0

    def complete(self, success: bool = True, error_message: Optional[str] = None):
        """Mark stage as completed and calculate duration"""
        self.end_time = datetime.now()
        self.duration_seconds = time.perf_counter() - self._clock
        self.success = success
        self.error_message = error_message


class PerformanceMonitor:
    """Thread-safe store of stage timings for one process"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.stage_metrics: List[StageMetrics] = []
        self.active_stages: Dict[str, StageMetrics] = {}
        self._lock = threading.Lock()

    def start_stage(self, stage_id: str, stage_type: str) -> str:
        """
        Start tracking a stage

        Args:
            stage_id: Unique identifier for the stage
            stage_type: Category used in summaries

        Returns:
            Stage tracking ID
        """
        with self._lock:
            metrics = StageMetrics(stage_id=stage_id, stage_type=stage_type,
                                   start_time=datetime.now(), _clock=time.perf_counter())
            self.active_stages[stage_id] = metrics

        self.logger.debug(f"Started stage {stage_id} ({stage_type})")
        return stage_id

    def complete_stage(self, stage_id: str, success: bool = True, error_message: Optional[str] = None):
        """Complete stage tracking and store metrics"""
        with self._lock:
            if stage_id not in self.active_stages:
                self.logger.warning(f"Stage {stage_id} not found in active stages")
                return

            metrics = self.active_stages.pop(stage_id)
            metrics.complete(success, error_message)
            self.stage_metrics.append(metrics)

        status = "SUCCESS" if success else "FAILED"
        self.logger.debug(f"Stage {stage_id} completed in {metrics.duration_seconds:.2f}s - {status}")

    @contextmanager
    def track(self, stage_id: str, stage_type: str):
        """Context manager timing the enclosed block"""
        self.start_stage(stage_id, stage_type)
        try:
            yield
        except Exception as e:
            self.complete_stage(stage_id, success=False, error_message=str(e))
            raise
        self.complete_stage(stage_id)

    def summary(self) -> Dict[str, Any]:
        """Per stage-type counts and durations"""
        with self._lock:
            completed = [s for s in self.stage_metrics if s.duration_seconds is not None]

        by_type = defaultdict(list)
        for stage in completed:
            by_type[stage.stage_type].append(stage)

        return {
            'total_stages': len(completed),
            'total_seconds': sum(s.duration_seconds for s in completed),
            'failed_stages': sum(1 for s in completed if not s.success),
            'stage_types': {
                stype: {
                    'count': len(stages),
                    'failed': sum(1 for s in stages if not s.success),
                    'total_duration': sum(s.duration_seconds for s in stages),
                    'max_duration': max(s.duration_seconds for s in stages),
                }
                for stype, stages in sorted(by_type.items())
            },
        }

    def reset(self) -> None:
        with self._lock:
            self.stage_metrics.clear()
            self.active_stages.clear()

# Global performance monitor instance
_performance_monitor: Optional[PerformanceMonitor] = None
_monitor_lock = threading.Lock()


def get_performance_monitor() -> PerformanceMonitor:
    """Get the global performance monitor instance"""
    global _performance_monitor
    with _monitor_lock:
        if _performance_monitor is None:
            _performance_monitor = PerformanceMonitor()
    return _performance_monitor


def track_stage(stage_type: str):
    """
    Decorator timing every call of a function as one stage

    Args:
        stage_type: Category used in summaries
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            monitor = get_performance_monitor()
            stage_id = f"{func.__name__}_{time.perf_counter_ns()}"
            with monitor.track(stage_id, stage_type):
                return func(*args, **kwargs)

        return wrapper
    return decorator
