"""Generated storefront workload: browse, search, login, history and purchase.

Statements stay clear of the secret columns (``customers.password`` and both
``creditcard`` columns) so every generated request is benign under the
bundled policy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .model import RemoteAddr
from .shim import SimRequest

ACTORS = ("GRANT", "HEPBURN", "KELLY", "BOGART", "STEWART", "BACALL", "NIVEN", "PECK")
WORDS = ("ACADEMY", "AFRICAN", "AGENT", "ALADDIN", "BANGER", "CHAMBER", "DINOSAUR", "EGG")


def _login(rng: random.Random, i: int) -> list[str]:
    n = rng.randrange(1, 20000)
    return [f"SELECT id, name, city FROM customers WHERE email = 'user{n}@example.com'"]


def _browse_category(rng: random.Random, i: int) -> list[str]:
    return [
        "SELECT category, categoryname FROM categories",
        f"SELECT id, title, price FROM products WHERE category = {rng.randrange(1, 17)} AND special = 1",
    ]


def _browse_actor(rng: random.Random, i: int) -> list[str]:
    a = rng.choice(ACTORS)
    return [f"SELECT id, title, actor FROM products WHERE actor LIKE '%{a}%' ORDER BY title LIMIT 10"]


def _search_title(rng: random.Random, i: int) -> list[str]:
    w = rng.choice(WORDS)
    return [
        "SELECT p.id, p.title, i.quan_in_stock FROM products p JOIN inventory i ON p.id = i.prod_id "
        f"WHERE p.title = '{w} {rng.randrange(1000)}'"
    ]


def _history(rng: random.Random, i: int) -> list[str]:
    c = rng.randrange(1, 20000)
    return [
        "SELECT o.id, o.total, o.orderdate FROM orders o "
        f"WHERE o.customer_id = {c} ORDER BY o.orderdate DESC LIMIT 10"
    ]


def _purchase(rng: random.Random, i: int) -> list[str]:
    c, p = rng.randrange(1, 20000), rng.randrange(1, 10000)
    oid = 100000 + i
    total = f"{rng.randrange(100, 9999) / 100:.2f}"
    return [
        f"INSERT INTO orders (id, customer_id, total, orderdate) VALUES ({oid}, {c}, {total}, '2026-05-01')",
        f"INSERT INTO orderlines (id, order_id, prod_id, quantity) VALUES ({oid}, {oid}, {p}, 1)",
        f"UPDATE inventory SET quan_in_stock = quan_in_stock - 1, sales = sales + 1 WHERE prod_id = {p}",
    ]


# (weight, label, template)
MIX = (
    (20, "login", _login),
    (25, "browse-category", _browse_category),
    (15, "browse-actor", _browse_actor),
    (20, "search-title", _search_title),
    (10, "history", _history),
    (10, "purchase", _purchase),
)


@dataclass(frozen=True)
class WorkloadSpec:
    count: int = 1000
    seed: int = 0
    hosts: int = 64

    @classmethod
    def from_json(cls, obj: dict) -> "WorkloadSpec":
        return cls(int(obj.get("count", 1000)), int(obj.get("seed", 0)), int(obj.get("hosts", 64)))


def generate(spec: WorkloadSpec) -> list[SimRequest]:
    rng = random.Random(spec.seed)
    weights = [w for w, _, _ in MIX]
    out = []
    for i in range(spec.count):
        _, label, make = rng.choices(MIX, weights)[0]
        h = rng.randrange(spec.hosts)
        addr = RemoteAddr(f"10.0.{h // 250}.{h % 250 + 1}", 20000 + i % 40000)
        out.append(SimRequest(addr, tuple(make(rng, i)), label=label, expect="ALLOW"))
    return out
