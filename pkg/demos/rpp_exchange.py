"""
One relative position ping, then a crowded channel
===================================================

A single uncontended RPP between two agents, frame by frame, followed by
saturated throughput as more senders share one observer. With one channel
and a 46 ms transaction the whole network tops out near 20 RPP/s, so each
of the Ns - 1 senders gets roughly 20 / (Ns - 1).

Run::

    python demos/rpp_exchange.py
"""

from tetraloc.protocol import Frame, FrameType, rpp_duration
from tetraloc.sim import measure_throughput, single_exchange

print(f"rpp_duration(32 bytes) = {rpp_duration(32)} ms\n")

net = single_exchange(msg_len=32)
print(" t (ms)  node  type       bytes")
for t, node, hx in net.frames:
    f = Frame.from_bytes(bytes.fromhex(hx))
    print(f"{t:7.2f}  {node:4d}  {FrameType(f.frame_type).name:9s}  {len(hx) // 2}")
tx = net.transactions[0]
print(f"\ntransaction {tx.transaction_id}: {tx.outcome} in {tx.duration} ms")
ping = net.pings[0]
print(f"estimate {ping.estimate.position.round(3)} vs truth {ping.truth.round(3)}")

print("\n Ns  total/s  per-agent/s  expected")
for ns in (2, 3, 4, 5):
    r = measure_throughput(ns, 120, 60.0, seed=ns)
    print(f"{ns:3d}  {r.total_rate:7.2f}  {r.per_agent_rate:11.2f}  {20 / (ns - 1):8.2f}")
