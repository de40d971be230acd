"""SLO-driven multi-tenant autoscaling for model-serving replicas."""

__version__ = "0.1.0"
