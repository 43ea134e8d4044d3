import datetime
import json
import os
import time
from collections import defaultdict, deque

import numpy as np


class SmoothedValue(object):
    """Track a series of values and provide access to smoothed values over a
    window or the global series average.
    """

    def __init__(self, window_size=20, fmt=None):
        if fmt is None:
            fmt = "{value:.4g} ({global_avg:.4g})"
        self.deque = deque(maxlen=window_size)
        self.total = 0.0
        self.count = 0
        self.fmt = fmt

    def update(self, value, n=1):
        self.deque.append(value)
        self.count += n
        self.total += value * n

    @property
    def median(self):
        return float(np.median(self.deque))

    @property
    def avg(self):
        return float(np.mean(self.deque))

    @property
    def global_avg(self):
        return self.total / self.count

    @property
    def max(self):
        return max(self.deque)

    @property
    def value(self):
        return self.deque[-1]

    def __str__(self):
        return self.fmt.format(
            median=self.median, avg=self.avg, global_avg=self.global_avg, max=self.max, value=self.value
        )


class MetricLogger(object):
    def __init__(self, delimiter="  ", print_fn=print):
        self.meters = defaultdict(SmoothedValue)
        self.delimiter = delimiter
        self.print_fn = print_fn

    def update(self, **kwargs):
        for k, v in kwargs.items():
            if v is None:
                continue
            if isinstance(v, np.generic):
                v = v.item()
            assert isinstance(v, (float, int)), f"Invalid meter value for {k}: {type(v)}"
            self.meters[k].update(v)

    def __getattr__(self, attr):
        if attr in self.meters:
            return self.meters[attr]
        if attr in self.__dict__:
            return self.__dict__[attr]
        raise AttributeError(f"'{type(self).__name__}' object has no attribute '{attr}'")

    def __str__(self):
        return self.delimiter.join(f"{name}: {meter}" for name, meter in self.meters.items())

    def log_every(self, iterable, print_freq=1, header=None):
        """Yield from `iterable`, printing meters and an eta every `print_freq` items."""
        header = header or ""
        iterable = list(iterable)
        if not iterable:
            return
        start_time = end = time.perf_counter()
        iter_time = SmoothedValue(fmt="{avg:.4f}")
        space_fmt = ":" + str(len(str(len(iterable)))) + "d"
        log_msg = self.delimiter.join([header, "[{0" + space_fmt + "}/{1}]", "eta: {eta}", "{meters}", "time: {time}"])
        for i, obj in enumerate(iterable):
            yield obj
            iter_time.update(time.perf_counter() - end)
            if i % print_freq == 0 or i == len(iterable) - 1:
                eta_seconds = iter_time.global_avg * (len(iterable) - i - 1)
                eta_string = str(datetime.timedelta(seconds=int(eta_seconds)))
                self.print_fn(log_msg.format(i, len(iterable), eta=eta_string, meters=str(self), time=str(iter_time)))
            end = time.perf_counter()
        total_time = time.perf_counter() - start_time
        total_time_str = str(datetime.timedelta(seconds=int(total_time)))
        self.print_fn(f"{header} Total time: {total_time_str} ({total_time / len(iterable):.4f} s / it)")


def append_log(log_dir: str, stats: dict):
    """One JSON object per line in `log_dir/log.txt`."""
    if not log_dir:
        return
    os.makedirs(log_dir, exist_ok=True)
    with open(os.path.join(log_dir, "log.txt"), mode="a", encoding="utf-8") as f:
        f.write(json.dumps(stats, default=float) + "\n")
