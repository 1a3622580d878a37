import logging

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
logging.getLogger("surfrann").setLevel(logging.ERROR)
