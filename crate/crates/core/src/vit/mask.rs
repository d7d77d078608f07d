use super::config::RoutingMode;
use crate::grad::BoolMask;

/// Role of one token in the multimodal layout `[CLS, F, C, M]`.
/// Spatial indices are zero-based, row-major over the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Cls,
    Fusion(usize),
    Cam(usize),
    Mod(usize),
}

/// Roles of the full `1 + 3N` layout.
pub fn full_layout(n: usize) -> Vec<TokenRole> {
    let mut roles = Vec::with_capacity(1 + 3 * n);
    roles.push(TokenRole::Cls);
    roles.extend((0..n).map(TokenRole::Fusion));
    roles.extend((0..n).map(TokenRole::Cam));
    roles.extend((0..n).map(TokenRole::Mod));
    roles
}

/// Roles left after pruning: CLS then the fusion grid.
pub fn pruned_layout(n: usize) -> Vec<TokenRole> {
    let mut roles = Vec::with_capacity(1 + n);
    roles.push(TokenRole::Cls);
    roles.extend((0..n).map(TokenRole::Fusion));
    roles
}

/// Position of `role` in a layout with `n` patches per modality.
pub fn token_index(role: TokenRole, n: usize) -> usize {
    match role {
        TokenRole::Cls => 0,
        TokenRole::Fusion(i) => 1 + i,
        TokenRole::Cam(i) => 1 + n + i,
        TokenRole::Mod(i) => 1 + 2 * n + i,
    }
}

/// Query-by-key admissibility for one transformer layer.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub layer: usize,
    pub roles: Vec<TokenRole>,
    pub matrix: BoolMask,
}

impl AttentionMask {
    pub fn tokens(&self) -> usize {
        self.roles.len()
    }

    /// Whether `query` may attend to `key`; `false` if either role is absent.
    pub fn allows(&self, query: TokenRole, key: TokenRole) -> bool {
        let q = self.roles.iter().position(|&r| r == query);
        let k = self.roles.iter().position(|&r| r == key);
        match (q, k) {
            (Some(q), Some(k)) => self.matrix.get(q, k),
            _ => false,
        }
    }
}

/// Mask of `layer` under `mode` for a grid of `n` patches.
///
/// Full layout rows: CLS sees every token; `CAM(i)` sees all camera
/// tokens and CLS; `MOD(i)` sees all companion tokens and CLS; `FUSION(i)`
/// sees CLS, `CAM(i)`, `MOD(i)` and either only itself (pruned layer 0)
/// or every fusion token (persistent). Pruned layers after 0 run over
/// CLS + fusion without restriction.
pub fn make_mask(layer: usize, mode: RoutingMode, n: usize) -> AttentionMask {
    if mode.prunes() && layer >= 1 {
        let roles = pruned_layout(n);
        let t = roles.len();
        return AttentionMask {
            layer,
            roles,
            matrix: BoolMask::new(t, t, true),
        };
    }
    let roles = full_layout(n);
    let t = roles.len();
    let mut m = BoolMask::new(t, t, false);
    let idx = |r| token_index(r, n);
    for k in 0..t {
        m.set(0, k, true);
    }
    for i in 0..n {
        let f = idx(TokenRole::Fusion(i));
        m.set(f, 0, true);
        m.set(f, idx(TokenRole::Cam(i)), true);
        m.set(f, idx(TokenRole::Mod(i)), true);
        if mode.prunes() {
            m.set(f, f, true);
        } else {
            for j in 0..n {
                m.set(f, idx(TokenRole::Fusion(j)), true);
            }
        }
        let c = idx(TokenRole::Cam(i));
        let md = idx(TokenRole::Mod(i));
        m.set(c, 0, true);
        m.set(md, 0, true);
        for j in 0..n {
            m.set(c, idx(TokenRole::Cam(j)), true);
            m.set(md, idx(TokenRole::Mod(j)), true);
        }
    }
    AttentionMask {
        layer,
        roles,
        matrix: m,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenRole::*;

    #[test]
    fn layout_indexing() {
        let n = 4;
        let roles = full_layout(n);
        assert_eq!(roles.len(), 13);
        for i in 0..n {
            assert_eq!(roles[1 + n + i], Cam(i));
            assert_eq!(token_index(roles[1 + 2 * n + i], n), 1 + 2 * n + i);
        }
        assert_eq!(full_layout(196).len(), 589);
        assert_eq!(pruned_layout(196).len(), 197);
    }

    #[test]
    fn pruned_layer0_pairing() {
        let n = 4;
        let m = make_mask(0, RoutingMode::Pruned, n);
        assert!(!m.allows(Fusion(1), Cam(2)));
        assert!(m.allows(Fusion(1), Cam(1)));
        assert!(m.allows(Fusion(1), Mod(1)));
        assert!(m.allows(Fusion(1), Fusion(1)));
        assert!(!m.allows(Fusion(1), Fusion(2)));
        assert!(m.allows(Fusion(1), Cls));
        // CLS sees everything
        assert_eq!(m.matrix.row(0).iter().filter(|&&b| b).count(), 13);
        // no cross-modal leakage outside the fusion path
        assert!(!m.allows(Cam(0), Mod(0)));
        assert!(!m.allows(Mod(3), Fusion(3)));
        assert!(m.allows(Cam(0), Cam(3)));
    }

    #[test]
    fn pruned_later_layers_are_full() {
        let m = make_mask(1, RoutingMode::Pruned, 4);
        assert_eq!(m.tokens(), 5);
        assert_eq!(m.matrix.count_allowed(), 25);
    }

    #[test]
    fn persistent_keeps_pairs() {
        let n = 3;
        for layer in 0..4 {
            let m = make_mask(layer, RoutingMode::Persistent, n);
            assert_eq!(m.tokens(), 10);
            for i in 0..n {
                assert!(m.allows(Fusion(i), Cam(i)));
                assert!(m.allows(Fusion(i), Mod(i)));
                for j in 0..n {
                    assert!(m.allows(Fusion(i), Fusion(j)));
                    if i != j {
                        assert!(!m.allows(Fusion(i), Cam(j)));
                    }
                }
            }
        }
    }
}
