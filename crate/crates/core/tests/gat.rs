use ndarray::{array, Array2};
use proptest::prelude::*;

use slotgraph::depgraph::{build_adjacency, AdjacencyMatrix, DepParse};
use slotgraph::encoder::TokenFeatures;
use slotgraph::gat::{attention_coeffs, gat_forward, GatLayer, LEAKY_SLOPE};
use slotgraph::params::{rng_for, uniform, ParamStore};
use slotgraph::tape::Mode;

const E: f64 = std::f64::consts::E;

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Straight loop implementation of one multi-head layer.
fn reference(store: &ParamStore, layer: &GatLayer, h: &Array2<f64>, adj: &AdjacencyMatrix) -> Array2<f64> {
    let n = h.nrows();
    let mut heads_out = Vec::new();
    for head in &layer.heads {
        let w = store.get(head.w);
        let a = store.get(head.a);
        let hd = w.nrows();
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..hd).map(|r| (0..w.ncols()).map(|c| w[[r, c]] * h[[i, c]]).sum()).collect())
            .collect();
        let mut out = Array2::zeros((n, hd));
        for i in 0..n {
            let nb: Vec<usize> = (0..n).filter(|&j| adj.is_edge(i, j)).collect();
            let scores: Vec<f64> = nb
                .iter()
                .map(|&j| {
                    let s: f64 = (0..hd).map(|t| a[[0, t]] * z[i][t] + a[[0, hd + t]] * z[j][t]).sum();
                    if s > 0.0 {
                        s
                    } else {
                        LEAKY_SLOPE * s
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = ex.iter().sum();
            for t in 0..hd {
                let agg: f64 = nb.iter().zip(&ex).map(|(&j, e)| e / total * z[j][t]).sum();
                out[[i, t]] = elu(agg);
            }
        }
        heads_out.push(out);
    }
    let views: Vec<_> = heads_out.iter().map(|a| a.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views).unwrap()
}

#[test]
fn three_node_hand_computed_case() {
    // One word: nodes [CLS], w1, [SEP] with edges CLS–w1 and w1–SEP.
    let adj = build_adjacency(&DepParse::new(vec![0], 1).unwrap());
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", 1, 2, 2, 0.0, 0);
    *store.get_mut(layer.heads[0].w) = Array2::eye(2);
    *store.get_mut(layer.heads[0].a) = array![[0.0, 0.0, 1.0, 0.0]];
    let h = TokenFeatures(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);

    // Score of edge i→j is the first feature of j: 1, 0, 1.
    let alpha = array![
        [E / (E + 1.0), 1.0 / (E + 1.0), 0.0],
        [E / (2.0 * E + 1.0), 1.0 / (2.0 * E + 1.0), E / (2.0 * E + 1.0)],
        [0.0, 1.0 / (1.0 + E), E / (1.0 + E)],
    ];
    let g = array![
        [E / (E + 1.0), 1.0 / (E + 1.0)],
        [2.0 * E / (2.0 * E + 1.0), (1.0 + E) / (2.0 * E + 1.0)],
        [E / (1.0 + E), 1.0],
    ];
    let got_alpha = &attention_coeffs(&store, &layer, &h, &adj).unwrap()[0];
    let got = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).unwrap();
    assert!(close(got_alpha, &alpha, 1e-9), "{got_alpha}");
    assert!(close(&got.0, &g, 1e-9), "{}", got.0);
}

#[test]
fn negative_aggregate_goes_through_elu() {
    let adj = AdjacencyMatrix::identity(1);
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", 1, 1, 1, 0.0, 0);
    *store.get_mut(layer.heads[0].w) = array![[1.0]];
    let h = TokenFeatures(array![[-2.0]]);
    let g = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).unwrap();
    assert!((g.0[[0, 0]] - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
}

/// Random tree over `n` words: word `k` of `order` attaches to an earlier one.
fn parse_from(order: &[usize], picks: &[usize]) -> DepParse {
    let n = order.len();
    let mut heads = vec![0; n];
    for k in 1..n {
        let parent = order[picks[k - 1] % k];
        heads[order[k] - 1] = parent;
    }
    DepParse::new(heads, 1).unwrap()
}

fn tree() -> impl Strategy<Value = DepParse> {
    (1usize..7).prop_flat_map(|n| {
        (
            Just((1..=n).collect::<Vec<_>>()).prop_shuffle(),
            proptest::collection::vec(0usize..100, n.saturating_sub(1)),
        )
            .prop_map(|(order, picks)| parse_from(&order, &picks))
    })
}

fn setup(k: usize, d_in: usize, d_out: usize, n: usize, seed: u64) -> (ParamStore, GatLayer, TokenFeatures) {
    let mut store = ParamStore::new();
    let layer = GatLayer::new(&mut store, "g", k, d_in, d_out, 0.0, seed);
    let h = TokenFeatures(uniform(n, d_in, 1.5, &mut rng_for(seed, "features")));
    (store, layer, h)
}

proptest! {
    #[test]
    fn matches_loop_reference(parse in tree(), k in 1usize..4, seed in 0u64..1000) {
        let adj = build_adjacency(&parse);
        let (store, layer, h) = setup(k, 3, 2 * k, adj.size(), seed);
        let got = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).unwrap();
        let want = reference(&store, &layer, &h.0, &adj);
        prop_assert!(close(&got.0, &want, 1e-12));
    }

    #[test]
    fn rows_are_distributions_over_neighbors(parse in tree(), seed in 0u64..1000) {
        let adj = build_adjacency(&parse);
        let (store, layer, h) = setup(2, 4, 4, adj.size(), seed);
        for alpha in attention_coeffs(&store, &layer, &h, &adj).unwrap() {
            for i in 0..adj.size() {
                prop_assert!((alpha.row(i).sum() - 1.0).abs() <= 1e-9);
                for j in 0..adj.size() {
                    if adj.is_edge(i, j) {
                        prop_assert!(alpha[[i, j]] > 0.0);
                    } else {
                        prop_assert_eq!(alpha[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn output_depends_only_on_neighbors(parse in tree(), seed in 0u64..1000, shift in -3.0f64..3.0) {
        let adj = build_adjacency(&parse);
        let n = adj.size();
        let (store, layer, h) = setup(2, 3, 4, n, seed);
        let base = gat_forward(&store, &layer, &h, &adj, Mode::Eval, 0).unwrap();
        for i in 0..n {
            let mut moved = h.0.clone();
            for j in (0..n).filter(|&j| !adj.is_edge(i, j)) {
                moved.row_mut(j).mapv_inplace(|v| v + shift + j as f64);
            }
            let g = gat_forward(&store, &layer, &TokenFeatures(moved), &adj, Mode::Eval, 0).unwrap();
            prop_assert_eq!(g.0.row(i), base.0.row(i));
        }
    }
}
