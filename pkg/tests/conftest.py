"""Shared pytest configuration.

Hypothesis deadlines are disabled: several properties drive numpy-heavy code
whose first call pays a dispatch/allocation warm-up that trips the default
200 ms deadline on slow CI boxes without indicating anything wrong.
"""

from __future__ import annotations

from hypothesis import HealthCheck, settings

settings.register_profile(
    "numerics",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numerics")
