"""Column-level SQL provenance capture with an egress guard."""

from .extract import Extraction, extract, extract_sql, to_events
from .guard import Policy, PolicyRule, Verdict, evaluate, parse_policy
from .model import EventKind, ProvEvent, RemoteAddr, SqlObject
from .recorder import AncestrySummary, GcVerdict, ProvGraph
from .schema import Schema, load_schema, parse_schema
from .sql import ParseError, parse

__all__ = [
    "AncestrySummary", "EventKind", "Extraction", "GcVerdict", "ParseError", "Policy",
    "PolicyRule", "ProvEvent", "ProvGraph", "RemoteAddr", "Schema", "SqlObject", "Verdict",
    "evaluate", "extract", "extract_sql", "load_schema", "parse", "parse_policy",
    "parse_schema", "to_events",
]
__version__ = "0.1.0"
