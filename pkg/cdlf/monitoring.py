import logging
import logging.config
import os
from contextlib import contextmanager
from enum import Enum, unique
from time import perf_counter

import sentry_sdk as sentry
import statsd
from sentry_sdk.integrations.logging import LoggingIntegration

LOG_FORMAT = (
    "[%(asctime)s.%(msecs)03d] %(name)s [pid:%(process)s] - %(levelname)s - %(message)s"
)

COUNTED_EVENTS = ("train-checkpoint", "stability-enforce", "stability-reinit", "evaluate-window")
TIMED_EVENTS = ("train", "rollout", "evaluate", "oracle-sim", "full-run-time")


def configure_logging(args):
    log_level = getattr(args, "log_level", None) or os.getenv("LOG_LEVEL", "INFO")

    settings = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "normal": {"format": LOG_FORMAT, "datefmt": "%Y-%m-%d %H:%M:%S"}
        },
        "handlers": {
            "console": {
                "level": log_level,
                "class": "logging.StreamHandler",
                "formatter": "normal",
                "stream": "ext://sys.stdout",
            }
        },
        "loggers": {"cdlf": {"level": log_level, "handlers": ["console"]}},
    }
    logging.config.dictConfig(settings)


def init_sentry():
    dsn = os.getenv("SENTRY_DSN")

    if dsn is not None:
        sentry_logging = LoggingIntegration(level=logging.INFO, event_level=logging.WARNING)
        sentry.init(
            dsn=dsn,
            integrations=[sentry_logging],
            environment=os.getenv("SENTRY_ENVIRONMENT"),
            release=os.getenv("SENTRY_RELEASE"),
        )


class FakeStatsd(object):
    @contextmanager
    def timer(self, *args, **kwargs):
        # pylint: disable=unused-argument
        yield None

    def timing(self, *args, **kwargs):
        pass

    def incr(self, *args, **kwargs):
        pass


def get_statsd_client():
    host = os.getenv("STATSD_HOST")
    port = os.getenv("STATSD_PORT")
    prefix = os.getenv("STATSD_PREFIX")
    if host and port:
        return statsd.StatsClient(host, int(port), prefix)
    return FakeStatsd()


@unique
class EventState(Enum):
    START = 1
    ERROR = 2
    COMPLETE = 3


class MonitoringProvider(object):
    """Hook for observing a running forecaster.

    Training, evaluation and the oracle simulator call ``on_event`` at the
    points listed in the docs. Subclass and override ``on_event`` to route
    those events elsewhere.

    event: str
        Event name, e.g. ``train-checkpoint`` or ``evaluate-window``.

    event_state: EventState
        Started, completed or errored.

    Keyword arguments depend on the event. ``variant`` and ``series`` tag
    ablation variants and series ids; ``et`` is the elapsed time of a
    wrapped block and ``ex`` the exception that ended it, which is re-raised
    after ``on_event`` returns.
    """

    def on_event(self, event, event_state, **kwargs):
        pass

    @contextmanager
    def wrap(self, event, **kwargs):
        self.on_event(event, EventState.START, **kwargs)
        started = perf_counter()
        try:
            yield None
        except Exception as ex:
            kwargs.update({"et": perf_counter() - started, "ex": ex})
            self.on_event(event, EventState.ERROR, **kwargs)
            raise
        kwargs.update({"et": perf_counter() - started})
        self.on_event(event, EventState.COMPLETE, **kwargs)

    def timer(self, event, **t_kwargs):
        def decorator(func):
            def wrapper(*args, **f_kwargs):
                with self.wrap(event, **t_kwargs):
                    return func(*args, **f_kwargs)

            return wrapper

        return decorator

    def record_event(self, event, **kwargs):
        self.on_event(event, EventState.COMPLETE, **kwargs)

    def record_error(self, event, **kwargs):
        self.on_event(event, EventState.ERROR, **kwargs)


class DefaultMonitoringProvider(MonitoringProvider):
    """Posts counters and timings to statsd.

    Statsd is only contacted when ``STATSD_HOST`` and ``STATSD_PORT`` are
    set. Subclass this to keep the statsd behavior and add your own, or
    subclass :class:`MonitoringProvider` to drop it.
    """

    def __init__(self, client=None):
        super(DefaultMonitoringProvider, self).__init__()
        self.statsd_client = client or statsd_client

    @staticmethod
    def event_name(event, **kwargs):
        parts = ["cdlf", event]
        for tag in ("variant", "series"):
            if kwargs.get(tag) is not None:
                parts.append(str(kwargs[tag]))
        return ".".join(parts)

    def on_event(self, event, event_state, **kwargs):
        if event_state != EventState.COMPLETE:
            return
        name = self.event_name(event, **kwargs)
        if event in COUNTED_EVENTS:
            self.statsd_client.incr(name)
        if event in TIMED_EVENTS and kwargs.get("et") is not None:
            self.statsd_client.timing(name, kwargs["et"] * 1000.0)


statsd_client = get_statsd_client()
init_sentry()
