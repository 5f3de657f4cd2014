"""Hand-laid pcap/Ethernet/IPv4/TCP bytes, written independently of the package encoder."""

import socket
import struct


def ipv4(addr):
    return socket.inet_aton(addr)


def tcp_frame(src, dst, sport, dport, seq, flags, payload=b"", vlan=None, proto=6, frag=0, trailer=b""):
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 5 << 4, flags, 65535, 0, 0) + payload
    ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(tcp), 1, frag, 64, proto, 0, ipv4(src), ipv4(dst)) + tcp
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01"
    if vlan is not None:
        eth += struct.pack(">HH", 0x8100, vlan)
    return eth + b"\x08\x00" + ip + trailer


def pcap(frames, big_endian=False, magic=0xA1B2C3D4, linktype=1):
    e = ">" if big_endian else "<"
    out = struct.pack(e + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for ts_sec, ts_usec, frame in frames:
        out += struct.pack(e + "IIII", ts_sec, ts_usec, len(frame), len(frame)) + frame
    return out
