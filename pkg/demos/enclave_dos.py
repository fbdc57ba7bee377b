"""Seek a vulnerable machine, then hammer next to enclave memory until it halts."""

from hammersim.orchestrator import MachineSpec, run_dos

for out in run_dos([MachineSpec()], seed=0):
    d = out.diagnostics
    print(f"{d['machine']}: vulnerable={d['vulnerable']} state={out.machine_state}")
    print(f"  pages next to enclave memory: {d.get('epc_adjacent_pages')}")
    for phase, seconds in out.phases:
        print(f"  {phase:8s} {seconds:10.3f} s")
