"""Page-cache eviction vs memory exhaustion on a 256 MiB machine.

Both evict the target page. Only one of them needs the attacker to own most
of memory while doing it.
"""

from hammersim.osmodel import TARGET_FILE, build_system
from hammersim.rng import substream
from hammersim.waylay import evict_target, exhaustion_evict

key = (TARGET_FILE, 8)
for name in ("page_cache", "exhaustion"):
    rng = substream(1, name)
    os_ = build_system(2**16, rng)
    proc = os_.spawn()
    run = evict_target(os_, key, pid=proc.pid) if name == "page_cache" else exhaustion_evict(os_, key, rng)
    print(f"{name:11s} evicted={run.target_evicted} peak usage={run.peak_usage:.1%} "
          f"attacker RSS={run.peak_rss_bytes / 2**20:.1f} MiB  {run.elapsed_s:.2f} s")
