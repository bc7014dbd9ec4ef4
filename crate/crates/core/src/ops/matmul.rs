use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Batched product over the trailing two axes: `(n, c, m, k) x (n, c, k, p)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.n != bd.n {
        return Err(Error::shape("matmul", "batch", format!("{ad} vs {bd}")));
    }
    if ad.c != bd.c {
        return Err(Error::shape("matmul", "channel", format!("{ad} vs {bd}")));
    }
    if ad.w != bd.h {
        return Err(Error::shape("matmul", "width", format!("inner dims {ad} vs {bd}")));
    }
    let (m, k, p) = (ad.h, ad.w, bd.w);
    let mut out = Tensor::zeros(Dims::new(ad.n, ad.c, m, p));
    for i in 0..ad.n * ad.c {
        let c = &mut out.data_mut()[i * m * p..(i + 1) * m * p];
        gemm(
            m,
            k,
            p,
            &a.data()[i * m * k..][..m * k],
            false,
            &b.data()[i * k * p..][..k * p],
            false,
            c,
            0.0,
        );
    }
    Ok(out)
}

/// `(da, db)` for `out = a · b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (ad, bd) = (a.dims(), b.dims());
    let (m, k, p) = (ad.h, ad.w, bd.w);
    dy.expect_same_dims(&Tensor::zeros(Dims::new(ad.n, ad.c, m, p)), "matmul_backward")?;
    let mut da = Tensor::zeros(ad);
    let mut db = Tensor::zeros(bd);
    for i in 0..ad.n * ad.c {
        let g = &dy.data()[i * m * p..][..m * p];
        let av = &a.data()[i * m * k..][..m * k];
        let bv = &b.data()[i * k * p..][..k * p];
        gemm(m, p, k, g, false, bv, true, &mut da.data_mut()[i * m * k..][..m * k], 0.0);
        gemm(k, m, p, av, true, g, false, &mut db.data_mut()[i * k * p..][..k * p], 0.0);
    }
    Ok((da, db))
}
