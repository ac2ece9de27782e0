//! A small reverse-mode tape over row-major matrices.
//!
//! Only the handful of ops the score network and its Jacobian-column
//! losses need.

#[derive(Debug, Clone)]
pub(crate) struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }
    fn same_shape(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

pub(crate) type Node = usize;

#[derive(Debug)]
enum Op {
    Const,
    Param { offset: usize },
    /// `a * w^T` with `w` stored `out x in`.
    MatMulT { a: Node, w: Node },
    AddBias { a: Node, b: Node },
    Silu(Node),
    SiluPrime(Node),
    Mul(Node, Node),
    Add(Node, Node),
    Sub(Node, Node),
    RowScale { a: Node, s: Vec<f64> },
    Concat(Vec<Node>),
    Gather { table: Node, idx: Vec<usize> },
    /// Every row equals column `col` of `w`.
    WeightColumn { w: Node, col: usize },
    /// `a[r, c] * b[r, col]`.
    MulColumn { a: Node, b: Node, col: usize },
    /// `sum_r weight_r * sum_c a[r, c]^2`.
    WeightedSumSq { a: Node, weights: Vec<f64> },
    Scale { a: Node, c: f64 },
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub(crate) fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub(crate) fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn silu_second(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}

#[derive(Default)]
pub(crate) struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Node {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.values[n]
    }

    pub fn constant(&mut self, t: Tensor) -> Node {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Node {
        let data = params[offset..offset + rows * cols].to_vec();
        self.push(Tensor::from_vec(rows, cols, data), Op::Param { offset })
    }

    pub fn matmul_t(&mut self, a: Node, w: Node) -> Node {
        let (av, wv) = (&self.values[a], &self.values[w]);
        debug_assert_eq!(av.cols, wv.cols);
        let (b, k, o) = (av.rows, av.cols, wv.rows);
        let mut out = Tensor::zeros(b, o);
        for r in 0..b {
            let ar = &av.data[r * k..(r + 1) * k];
            let orow = &mut out.data[r * o..(r + 1) * o];
            for (j, oj) in orow.iter_mut().enumerate() {
                let wr = &wv.data[j * k..(j + 1) * k];
                *oj = ar.iter().zip(wr).map(|(x, y)| x * y).sum();
            }
        }
        self.push(out, Op::MatMulT { a, w })
    }

    pub fn add_bias(&mut self, a: Node, b: Node) -> Node {
        let (av, bv) = (&self.values[a], &self.values[b]);
        let mut out = av.clone();
        for r in 0..av.rows {
            for (o, bj) in out.data[r * av.cols..(r + 1) * av.cols].iter_mut().zip(&bv.data) {
                *o += bj;
            }
        }
        self.push(out, Op::AddBias { a, b })
    }

    fn map(&mut self, a: Node, f: fn(f64) -> f64, op: Op) -> Node {
        let av = &self.values[a];
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&z| f(z)).collect());
        self.push(out, op)
    }

    pub fn silu(&mut self, a: Node) -> Node {
        self.map(a, silu, Op::Silu(a))
    }

    pub fn silu_prime(&mut self, a: Node) -> Node {
        self.map(a, silu_prime, Op::SiluPrime(a))
    }

    fn zip(&mut self, a: Node, b: Node, f: fn(f64, f64) -> f64, op: Op) -> Node {
        let (av, bv) = (&self.values[a], &self.values[b]);
        debug_assert_eq!((av.rows, av.cols), (bv.rows, bv.cols));
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect());
        self.push(out, op)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn row_scale(&mut self, a: Node, s: Vec<f64>) -> Node {
        let av = &self.values[a];
        debug_assert_eq!(s.len(), av.rows);
        let mut out = av.clone();
        for r in 0..av.rows {
            for v in &mut out.data[r * av.cols..(r + 1) * av.cols] {
                *v *= s[r];
            }
        }
        self.push(out, Op::RowScale { a, s })
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Node {
        let av = &self.values[a];
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|v| v * c).collect());
        self.push(out, Op::Scale { a, c })
    }

    pub fn concat(&mut self, parts: Vec<Node>) -> Node {
        let rows = self.values[parts[0]].rows;
        let cols: usize = parts.iter().map(|&p| self.values[p].cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in &parts {
                let pv = &self.values[p];
                out.data[r * cols + c0..r * cols + c0 + pv.cols].copy_from_slice(&pv.data[r * pv.cols..(r + 1) * pv.cols]);
                c0 += pv.cols;
            }
        }
        self.push(out, Op::Concat(parts))
    }

    pub fn gather(&mut self, table: Node, idx: Vec<usize>) -> Node {
        let tv = &self.values[table];
        let mut out = Tensor::zeros(idx.len(), tv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * tv.cols..(r + 1) * tv.cols].copy_from_slice(&tv.data[i * tv.cols..(i + 1) * tv.cols]);
        }
        self.push(out, Op::Gather { table, idx })
    }

    pub fn weight_column(&mut self, w: Node, col: usize, rows: usize) -> Node {
        let wv = &self.values[w];
        let column: Vec<f64> = (0..wv.rows).map(|o| wv.data[o * wv.cols + col]).collect();
        let mut out = Tensor::zeros(rows, wv.rows);
        for r in 0..rows {
            out.data[r * wv.rows..(r + 1) * wv.rows].copy_from_slice(&column);
        }
        self.push(out, Op::WeightColumn { w, col })
    }

    pub fn mul_column(&mut self, a: Node, b: Node, col: usize) -> Node {
        let (av, bv) = (&self.values[a], &self.values[b]);
        let mut out = av.clone();
        for r in 0..av.rows {
            let f = bv.data[r * bv.cols + col];
            for v in &mut out.data[r * av.cols..(r + 1) * av.cols] {
                *v *= f;
            }
        }
        self.push(out, Op::MulColumn { a, b, col })
    }

    pub fn weighted_sum_sq(&mut self, a: Node, weights: Vec<f64>) -> Node {
        let av = &self.values[a];
        let mut total = 0.0;
        for r in 0..av.rows {
            let s: f64 = av.data[r * av.cols..(r + 1) * av.cols].iter().map(|v| v * v).sum();
            total += weights[r] * s;
        }
        self.push(Tensor::from_vec(1, 1, vec![total]), Op::WeightedSumSq { a, weights })
    }

    /// Accumulates `d root / d params` into `grad`.
    pub fn backward(&self, root: Node, grad: &mut [f64]) {
        let mut adj: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        let mut seed = self.values[root].same_shape();
        seed.data.iter_mut().for_each(|v| *v = 1.0);
        adj[root] = Some(seed);

        fn acc<'a>(adj: &'a mut [Option<Tensor>], values: &[Tensor], n: Node) -> &'a mut Tensor {
            adj[n].get_or_insert_with(|| values[n].same_shape())
        }

        for n in (0..=root).rev() {
            let Some(g) = adj[n].take() else { continue };
            let v = &self.values;
            match &self.ops[n] {
                Op::Const => {}
                Op::Param { offset } => {
                    for (dst, src) in grad[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *dst += src;
                    }
                }
                Op::MatMulT { a, w } => {
                    let (av, wv) = (&v[*a], &v[*w]);
                    let (b, k, o) = (av.rows, av.cols, wv.rows);
                    let ga = acc(&mut adj, v, *a);
                    for r in 0..b {
                        let gr = &g.data[r * o..(r + 1) * o];
                        let dst = &mut ga.data[r * k..(r + 1) * k];
                        for (j, &gj) in gr.iter().enumerate() {
                            if gj == 0.0 {
                                continue;
                            }
                            for (d, wji) in dst.iter_mut().zip(&wv.data[j * k..(j + 1) * k]) {
                                *d += gj * wji;
                            }
                        }
                    }
                    let gw = acc(&mut adj, v, *w);
                    for r in 0..b {
                        let gr = &g.data[r * o..(r + 1) * o];
                        let ar = &av.data[r * k..(r + 1) * k];
                        for (j, &gj) in gr.iter().enumerate() {
                            if gj == 0.0 {
                                continue;
                            }
                            for (d, ai) in gw.data[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *d += gj * ai;
                            }
                        }
                    }
                }
                Op::AddBias { a, b } => {
                    let cols = g.cols;
                    {
                        let gb = acc(&mut adj, v, *b);
                        for r in 0..g.rows {
                            for (d, s) in gb.data.iter_mut().zip(&g.data[r * cols..(r + 1) * cols]) {
                                *d += s;
                            }
                        }
                    }
                    add_into(acc(&mut adj, v, *a), &g);
                }
                Op::Silu(a) => {
                    let z = &v[*a].data;
                    let ga = acc(&mut adj, v, *a);
                    for ((d, gi), zi) in ga.data.iter_mut().zip(&g.data).zip(z) {
                        *d += gi * silu_prime(*zi);
                    }
                }
                Op::SiluPrime(a) => {
                    let z = &v[*a].data;
                    let ga = acc(&mut adj, v, *a);
                    for ((d, gi), zi) in ga.data.iter_mut().zip(&g.data).zip(z) {
                        *d += gi * silu_second(*zi);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&v[*a].data, &v[*b].data);
                    {
                        let ga = acc(&mut adj, v, *a);
                        for ((d, gi), bi) in ga.data.iter_mut().zip(&g.data).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    let gb = acc(&mut adj, v, *b);
                    for ((d, gi), ai) in gb.data.iter_mut().zip(&g.data).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, v, *a), &g);
                    add_into(acc(&mut adj, v, *b), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, v, *a), &g);
                    let gb = acc(&mut adj, v, *b);
                    for (d, gi) in gb.data.iter_mut().zip(&g.data) {
                        *d -= gi;
                    }
                }
                Op::RowScale { a, s } => {
                    let ga = acc(&mut adj, v, *a);
                    let cols = g.cols;
                    for r in 0..g.rows {
                        for (d, gi) in ga.data[r * cols..(r + 1) * cols].iter_mut().zip(&g.data[r * cols..(r + 1) * cols]) {
                            *d += s[r] * gi;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let ga = acc(&mut adj, v, *a);
                    for (d, gi) in ga.data.iter_mut().zip(&g.data) {
                        *d += c * gi;
                    }
                }
                Op::Concat(parts) => {
                    let cols = g.cols;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = v[p].cols;
                        let gp = acc(&mut adj, v, p);
                        for r in 0..g.rows {
                            for (d, gi) in gp.data[r * pc..(r + 1) * pc].iter_mut().zip(&g.data[r * cols + c0..r * cols + c0 + pc]) {
                                *d += gi;
                            }
                        }
                        c0 += pc;
                    }
                }
                Op::Gather { table, idx } => {
                    let cols = g.cols;
                    let gt = acc(&mut adj, v, *table);
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, gi) in gt.data[i * cols..(i + 1) * cols].iter_mut().zip(&g.data[r * cols..(r + 1) * cols]) {
                            *d += gi;
                        }
                    }
                }
                Op::WeightColumn { w, col } => {
                    let wc = v[*w].cols;
                    let gw = acc(&mut adj, v, *w);
                    for r in 0..g.rows {
                        for o in 0..g.cols {
                            gw.data[o * wc + col] += g.data[r * g.cols + o];
                        }
                    }
                }
                Op::MulColumn { a, b, col } => {
                    let (av, bv) = (&v[*a], &v[*b]);
                    let cols = g.cols;
                    {
                        let ga = acc(&mut adj, v, *a);
                        for r in 0..g.rows {
                            let f = bv.data[r * bv.cols + col];
                            for (d, gi) in ga.data[r * cols..(r + 1) * cols].iter_mut().zip(&g.data[r * cols..(r + 1) * cols]) {
                                *d += gi * f;
                            }
                        }
                    }
                    let gb = acc(&mut adj, v, *b);
                    for r in 0..g.rows {
                        let s: f64 = (0..cols).map(|c| g.data[r * cols + c] * av.data[r * cols + c]).sum();
                        gb.data[r * bv.cols + col] += s;
                    }
                }
                Op::WeightedSumSq { a, weights } => {
                    let gs = g.data[0];
                    let av = &v[*a];
                    let cols = av.cols;
                    let ga = acc(&mut adj, v, *a);
                    for r in 0..av.rows {
                        let f = 2.0 * weights[r] * gs;
                        for (d, ai) in ga.data[r * cols..(r + 1) * cols].iter_mut().zip(&av.data[r * cols..(r + 1) * cols]) {
                            *d += f * ai;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}
