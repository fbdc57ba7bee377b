"""Every single-bit flip of a conditional jump, and which ones skip a check."""

from hammersim.opflip import decode, enumerate_flips, load_flip_database, scan_binary, synthetic_image, target_page
from hammersim.physmem import PAGE_SIZE

code = bytes.fromhex("85c07405") + b"\x90" * 16  # test eax, eax; jz +5
jz = decode(code, 2)
print(f"original: {jz}")
for f in enumerate_flips(code, 2):
    if f.byte_index == 0:
        print(f"  bit {f.bit}: {f.flipped.text:28s} {f.effect}")

entries = load_flip_database()
page, _ = target_page(entries)
image = synthetic_image(entries)
candidates, _ = scan_binary(image, [(page * PAGE_SIZE, (page + 1) * PAGE_SIZE)])
print(f"\ncandidate flips on the target page: {len(candidates)}")
