//! Test oracles that share no code with the crate.

#![allow(dead_code, clippy::needless_range_loop)]

const W: usize = 16;
const ROUNDS: usize = 20;

type Bits = [[[bool; W]; 5]; 5];

/// Round-constant bit from the degree-8 LFSR.
fn rc(t: usize) -> bool {
    if t.is_multiple_of(255) {
        return true;
    }
    let mut r = [true, false, false, false, false, false, false, false];
    for _ in 1..=t % 255 {
        let mut n = [false; 9];
        n[1..].copy_from_slice(&r);
        n[0] ^= n[8];
        n[4] ^= n[8];
        n[5] ^= n[8];
        n[6] ^= n[8];
        r.copy_from_slice(&n[..8]);
    }
    r[0]
}

/// Keccak-f[400] on a bit array, one step at a time.
pub fn keccak_f400_bits(lanes: [u16; 25]) -> [u16; 25] {
    let mut a: Bits = [[[false; W]; 5]; 5];
    for x in 0..5 {
        for y in 0..5 {
            for z in 0..W {
                a[x][y][z] = (lanes[x + 5 * y] >> z) & 1 == 1;
            }
        }
    }
    for ir in 0..ROUNDS {
        // theta
        let mut c = [[false; W]; 5];
        for x in 0..5 {
            for z in 0..W {
                c[x][z] = (0..5).fold(false, |acc, y| acc ^ a[x][y][z]);
            }
        }
        for x in 0..5 {
            for z in 0..W {
                let d = c[(x + 4) % 5][z] ^ c[(x + 1) % 5][(z + W - 1) % W];
                for y in 0..5 {
                    a[x][y][z] ^= d;
                }
            }
        }
        // rho
        let mut b = a;
        let (mut x, mut y) = (1, 0);
        for t in 0..24 {
            let shift = (t + 1) * (t + 2) / 2;
            for z in 0..W {
                b[x][y][z] = a[x][y][(z + W * 32 - shift) % W];
            }
            (x, y) = (y, (2 * x + 3 * y) % 5);
        }
        // pi
        let mut p = b;
        for x in 0..5 {
            for y in 0..5 {
                p[x][y] = b[(x + 3 * y) % 5][x];
            }
        }
        // chi
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..W {
                    a[x][y][z] = p[x][y][z] ^ (!p[(x + 1) % 5][y][z] & p[(x + 2) % 5][y][z]);
                }
            }
        }
        // iota, l = 4
        for j in 0..=4 {
            a[0][0][(1 << j) - 1] ^= rc(j + 7 * ir);
        }
    }
    let mut out = [0u16; 25];
    for x in 0..5 {
        for y in 0..5 {
            for z in 0..W {
                out[x + 5 * y] |= (a[x][y][z] as u16) << z;
            }
        }
    }
    out
}

/// The MAC recomputed from the permutation oracle: key, address and
/// previous MAC packed LSB-first into the 256-bit rate, pad10*1, first
/// `nm` output bits.
pub fn mac_bits(key: u64, na: u32, nm: u32, addr: u64, prev: u64) -> u64 {
    let mut msg: Vec<bool> = Vec::new();
    let push = |m: &mut Vec<bool>, v: u64, n: u32| m.extend((0..n).map(|i| (v >> i) & 1 == 1));
    push(&mut msg, key, 64);
    push(&mut msg, addr, na);
    push(&mut msg, prev, nm);
    let mut block = [false; 256];
    block[..msg.len()].copy_from_slice(&msg);
    block[msg.len()] ^= true;
    block[255] ^= true;
    let mut lanes = [0u16; 25];
    for (i, bit) in block.iter().enumerate() {
        lanes[i / 16] |= (*bit as u16) << (i % 16);
    }
    let out = keccak_f400_bits(lanes);
    (0..nm).fold(0, |acc, i| acc | ((((out[(i / 16) as usize] >> (i % 16)) & 1) as u64) << i))
}
