//! Random MiniLang programs for differential testing and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Ty;

const NAMES: [&str; 8] = ["a", "b", "c", "n", "s", "flag", "tmp", "x1"];
const FIELDS: [&str; 4] = ["f", "g", "h", "k"];
const JUNK: [&str; 16] = [
    "}", "{", "let ", ";", "zz", "\"", "/", "==", "+ \"s\"", "@", "\u{e9}", "int", "rec ", " 1", "= ", "if ",
];

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    scopes: Vec<Vec<(String, Ty)>>,
    fresh: usize,
}

impl Gen {
    fn indent(&mut self) {
        for _ in 1..self.scopes.len() {
            self.out.push_str("  ");
        }
    }

    fn vars_of(&self, ty: Ty) -> Vec<String> {
        let mut seen = Vec::<&str>::new();
        let mut out = Vec::new();
        for scope in self.scopes.iter().rev() {
            for (name, t) in scope.iter().rev() {
                if !seen.contains(&name.as_str()) {
                    seen.push(name);
                    if *t == ty {
                        out.push(name.clone());
                    }
                }
            }
        }
        out
    }

    fn any_var(&self) -> Option<(String, Ty)> {
        let mut best = None;
        for ty in [Ty::Int, Ty::Str, Ty::Bool] {
            if let Some(v) = self.vars_of(ty).into_iter().next() {
                best = Some((v, ty));
            }
        }
        best
    }

    fn fresh_name(&mut self) -> String {
        let here = self.scopes.last().unwrap();
        let free: Vec<&str> =
            NAMES.iter().copied().filter(|n| !here.iter().any(|(h, _)| h == n)).collect();
        if let Some(n) = free.choose(&mut self.rng) {
            return n.to_string();
        }
        self.fresh += 1;
        format!("t{}", self.fresh)
    }

    fn ty(&mut self) -> Ty {
        *[Ty::Int, Ty::Str, Ty::Bool].choose(&mut self.rng).unwrap()
    }

    fn atom(&mut self, ty: Ty) -> String {
        let vars = self.vars_of(ty);
        if !vars.is_empty() && self.rng.gen_bool(0.5) {
            return vars.choose(&mut self.rng).unwrap().clone();
        }
        match ty {
            Ty::Int => self.rng.gen_range(0..1000).to_string(),
            Ty::Str => {
                let pool = ["\"\"", "\"hi\"", "\"a b\"", "\"q\\\"t\"", "\"caf\u{e9}\"", "\"x;y\""];
                pool.choose(&mut self.rng).unwrap().to_string()
            }
            Ty::Bool => {
                let t = if self.rng.gen_bool(0.5) { Ty::Int } else { Ty::Str };
                let l = self.atom(t);
                let r = self.atom(t);
                format!("{l} == {r}")
            }
        }
    }

    fn expr(&mut self, ty: Ty) -> String {
        let mut e = self.atom(ty);
        if ty != Ty::Bool {
            while self.rng.gen_bool(0.3) {
                e = format!("{e} + {}", self.atom(ty));
            }
        }
        e
    }

    fn statement(&mut self) {
        let roll = self.rng.gen_range(0..100);
        let depth = self.scopes.len() - 1;
        self.indent();
        if roll < 40 || self.any_var().is_none() {
            let name = self.fresh_name();
            let ty = self.ty();
            let e = self.expr(ty);
            self.out.push_str(&format!("let {name}: {ty} = {e};\n"));
            self.scopes.last_mut().unwrap().push((name, ty));
        } else if roll < 65 {
            let (name, ty) = self.any_var().unwrap();
            let e = self.expr(ty);
            self.out.push_str(&format!("{name} = {e};\n"));
        } else if roll < 80 && depth < 3 {
            let c = self.expr(Ty::Bool);
            self.out.push_str(&format!("if {c} {{\n"));
            self.scopes.push(Vec::new());
            for _ in 0..self.rng.gen_range(0..4) {
                self.statement();
            }
            self.scopes.pop();
            self.indent();
            self.out.push_str("}\n");
        } else if roll < 90 {
            self.fresh += 1;
            let name = format!("R{}", self.fresh);
            self.out.push_str(&format!("rec {name} {{"));
            let mut fields: Vec<&str> = FIELDS.to_vec();
            fields.shuffle(&mut self.rng);
            for f in &fields[..self.rng.gen_range(0..=FIELDS.len())] {
                let ty = self.ty();
                self.out.push_str(&format!(" {f}: {ty};"));
            }
            self.out.push_str(" }\n");
        } else {
            self.out.push_str("// note\n");
        }
    }
}

/// A well-formed program of roughly `approx_len` bytes.
pub fn valid_program(seed: u64, approx_len: usize) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: String::new(),
        scopes: vec![Vec::new()],
        fresh: 0,
    };
    if g.rng.gen_bool(0.3) {
        g.out.push_str("// generated\n// program\n\n");
    }
    while g.out.len() < approx_len {
        g.statement();
    }
    g.out
}

/// A program that is usually, but not always, ill-formed: a valid program
/// with one to three random edits.
pub fn mutated_program(seed: u64, approx_len: usize) -> String {
    let mut src = valid_program(seed, approx_len).into_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..rng.gen_range(1..=3) {
        if src.is_empty() {
            break;
        }
        let at = rng.gen_range(0..src.len());
        match rng.gen_range(0..5) {
            0 => {
                let end = (at + rng.gen_range(1..8)).min(src.len());
                src.drain(at..end);
            }
            1 => {
                let junk = JUNK.choose(&mut rng).unwrap().as_bytes();
                src.splice(at..at, junk.iter().copied());
            }
            2 => src.truncate(at),
            3 => {
                let text = String::from_utf8_lossy(&src).into_owned();
                let swapped = match rng.gen_range(0..3) {
                    0 => text.replacen("int", "str", 1),
                    1 => text.replacen(": str", ": float", 1),
                    _ => text.replacen("g:", "f:", 1),
                };
                src = swapped.into_bytes();
            }
            _ => {
                let text = String::from_utf8_lossy(&src).into_owned();
                let lines: Vec<&str> = text.lines().collect();
                let pick = lines[rng.gen_range(0..lines.len())].to_string();
                let line_at = src[..at].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                src.splice(line_at..line_at, format!("{pick}\n").into_bytes());
            }
        }
    }
    // Edits may split a multi-byte character; keep the text valid UTF-8.
    String::from_utf8_lossy(&src).into_owned()
}

/// Valid or mutated with equal odds, sized between 40 and 600 bytes.
pub fn random_program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let len = rng.gen_range(40..600);
    if rng.gen_bool(0.5) {
        valid_program(seed, len)
    } else {
        mutated_program(seed, len)
    }
}

/// Split points partitioning `len` bytes into random chunks. With
/// `max_chunk == 1` every chunk is a single byte.
pub fn random_chunks<R: Rng>(rng: &mut R, len: usize, max_chunk: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < len {
        let n = rng.gen_range(1..=max_chunk.max(1)).min(len - at);
        out.push(at..at + n);
        at += n;
    }
    out
}
