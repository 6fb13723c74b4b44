"""Adaptive split scheduling for disaggregated LLM serving, as a discrete-event simulator."""

from splitserve.domain import MicroRequest, PlanView, Request, SplitPlan, split_point, split_request
from splitserve.costmodel import BatchShape, HardwareProfile, batch_latency, default_profile, transfer_time

__all__ = [
    "BatchShape",
    "HardwareProfile",
    "MicroRequest",
    "PlanView",
    "Request",
    "SplitPlan",
    "batch_latency",
    "default_profile",
    "split_point",
    "split_request",
    "transfer_time",
]

__version__ = "0.1.0"
