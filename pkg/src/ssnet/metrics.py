"""Communication accounting per protocol operation.

Counts are kept per (operation label, layer, party): field elements sent,
raw bytes sent and received, and send epochs. A round, for one operation, is
the maximum over parties of that party's send epochs, where a new epoch opens
on a party's first send and again on any send that follows a receive. That
matches the convention that in one round every participating party sends and
receives at most once.
"""

import json
import threading
from dataclasses import dataclass, field


@dataclass
class _PartyTally:
    elements_sent: int = 0
    bytes_sent: int = 0
    elements_received: int = 0
    bytes_received: int = 0
    epochs: int = 0
    _recv_since_send: bool = field(default=False, repr=False)


class CommMetrics:
    def __init__(self):
        self._lock = threading.Lock()
        self._current = {}           # party -> (op, layer)
        self._ops = []               # (op, layer) in first-seen order
        self._tallies = {}           # (op, layer) -> {party: _PartyTally}

    def _tally(self, party):
        key = self._current.get(party, ("unlabeled", -1))
        ops = self._tallies.setdefault(key, {})
        if key not in self._ops:
            self._ops.append(key)
        if party not in ops:
            ops[party] = _PartyTally()
        return ops[party]

    def set_op(self, party, op, layer=-1):
        with self._lock:
            self._current[party] = (op, layer)

    def on_send(self, party, nbytes, nelems):
        with self._lock:
            t = self._tally(party)
            if t.epochs == 0 or t._recv_since_send:
                t.epochs += 1
                t._recv_since_send = False
            t.bytes_sent += nbytes
            t.elements_sent += nelems

    def on_recv(self, party, nbytes, nelems):
        with self._lock:
            t = self._tally(party)
            t._recv_since_send = True
            t.bytes_received += nbytes
            t.elements_received += nelems

    # -- reporting --

    def op_keys(self):
        return list(self._ops)

    def elements_sent(self, op, layer=None):
        """Total field elements sent by all parties for matching operations."""
        total = 0
        for (o, l), parties in self._tallies.items():
            if o == op and (layer is None or l == layer):
                total += sum(t.elements_sent for t in parties.values())
        return total

    def rounds(self, op, layer):
        parties = self._tallies.get((op, layer), {})
        return max((t.epochs for t in parties.values()), default=0)

    def summary(self):
        """One dict per (op, layer): totals and the round count."""
        out = []
        for key in self._ops:
            parties = self._tallies[key]
            out.append({
                "op": key[0],
                "layer": key[1],
                "elements_sent": sum(t.elements_sent for t in parties.values()),
                "bytes_sent": sum(t.bytes_sent for t in parties.values()),
                "rounds": max((t.epochs for t in parties.values()), default=0),
            })
        return out

    def records(self):
        """One dict per (op, layer, party), ndjson-ready."""
        out = []
        for key in self._ops:
            for party in sorted(self._tallies[key]):
                t = self._tallies[key][party]
                out.append({
                    "op": key[0],
                    "layer": key[1],
                    "party": party,
                    "elements_sent": t.elements_sent,
                    "bytes_sent": t.bytes_sent,
                    "bytes_received": t.bytes_received,
                    "rounds": t.epochs,
                })
        return out

    def write_ndjson(self, fh):
        for rec in self.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def total_elements(self, skip_ops=("offline",)):
        return sum(r["elements_sent"] for r in self.summary()
                   if r["op"] not in skip_ops)
