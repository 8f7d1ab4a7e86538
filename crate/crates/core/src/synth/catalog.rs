use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{self, Vocab};
use crate::error::{Error, Result};
use crate::vision::{Image, Roi};

/// Indexes into the attribute word lists of [`vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub category: usize,
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    pub material: usize,
    pub brand: usize,
}

impl Attributes {
    /// Tokens a query may be built from, in canonical order.
    pub fn query_tokens(&self, v: &Vocab) -> [u32; 4] {
        [v.category(self.category), v.color(self.color), v.shape(self.shape), v.size(self.size)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProductRecord {
    pub product_id: u32,
    pub category: usize,
    pub attributes: Attributes,
    pub title: Vec<u32>,
    pub image: Image,
    pub truth_box: Roi,
}

/// Object extent in pixels for each size word, at a 64 px frame.
const SIZE_PX: [usize; 3] = [16, 24, 32];

/// Light background, tinted per category.
fn background(category: usize) -> [u8; 3] {
    let tint = |k: usize| ((category * k + 3) % 7) as i32 * 4 - 12;
    [(222 + tint(3)) as u8, (222 + tint(5)) as u8, (222 + tint(2)) as u8]
}

fn inside(shape: usize, dy: f32, dx: f32, r: f32) -> bool {
    let d2 = dx * dx + dy * dy;
    match vocab::SHAPES[shape] {
        "circle" => d2 <= r * r,
        "square" => true,
        "triangle" => {
            let v = (dy + r) / (2.0 * r);
            dx.abs() <= v * r
        }
        "diamond" => dx.abs() + dy.abs() <= r,
        "cross" => dx.abs() <= r / 3.0 || dy.abs() <= r / 3.0,
        "ring" => d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r),
        _ => unreachable!("unknown shape"),
    }
}

/// Draws one product image and returns it with the tight box of the drawn
/// object pixels.
pub fn draw_product(attrs: &Attributes, side: usize, rng: &mut impl Rng) -> Result<(Image, Roi)> {
    let s = (SIZE_PX[attrs.size] * side / 64).max(4).min(side);
    let top = rng.random_range(0..=side - s);
    let left = rng.random_range(0..=side - s);
    let bg = background(attrs.category);
    let fg = vocab::COLOR_RGB[attrs.color];
    let mut bytes: Vec<u8> = (0..side * side).flat_map(|_| bg).collect();
    let r = s as f32 / 2.0;
    let (cy, cx) = (top as f32 + r, left as f32 + r);
    let (mut t, mut l, mut b, mut rt) = (usize::MAX, usize::MAX, 0, 0);
    for y in top..top + s {
        for x in left..left + s {
            if inside(attrs.shape, y as f32 + 0.5 - cy, x as f32 + 0.5 - cx, r) {
                bytes[(y * side + x) * 3..][..3].copy_from_slice(&fg);
                t = t.min(y);
                l = l.min(x);
                b = b.max(y + 1);
                rt = rt.max(x + 1);
            }
        }
    }
    let truth = Roi {
        top: t,
        left: l,
        bottom: b,
        right: rt,
    };
    Ok((Image::from_rgb8(side, side, &bytes)?, truth))
}

/// Title words: the category always; colour, shape and size each with
/// probability 1/2 (so the image carries information the title may lack);
/// material and brand usually; up to two fillers; shuffled.
fn make_title(attrs: &Attributes, v: &Vocab, rng: &mut impl Rng) -> Vec<u32> {
    let mut t = vec![v.category(attrs.category)];
    for tok in [v.color(attrs.color), v.shape(attrs.shape), v.size(attrs.size)] {
        if rng.random_bool(0.5) {
            t.push(tok);
        }
    }
    if rng.random_bool(0.7) {
        t.push(v.material(attrs.material));
    }
    if rng.random_bool(0.8) {
        t.push(v.brand(attrs.brand));
    }
    for _ in 0..rng.random_range(0..=2) {
        t.push(v.filler(rng.random_range(0..vocab::FILLERS.len())));
    }
    t.shuffle(rng);
    t
}

/// Catalog with round-robin categories and uniformly drawn attributes.
pub fn gen_catalog(n_products: usize, n_categories: usize, image_side: usize, seed: u64) -> Result<Vec<ProductRecord>> {
    if n_categories == 0 || n_categories > vocab::CATEGORIES.len() {
        return Err(Error::config(
            "data.categories",
            format!("must be between 1 and {}", vocab::CATEGORIES.len()),
        ));
    }
    if n_products < n_categories {
        return Err(Error::config("data.products", "must be at least data.categories"));
    }
    if image_side < 16 {
        return Err(Error::config("data.image_size", "must be at least 16"));
    }
    let v = Vocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_products);
    for i in 0..n_products {
        let attrs = Attributes {
            category: i % n_categories,
            color: rng.random_range(0..vocab::COLORS.len()),
            shape: rng.random_range(0..vocab::SHAPES.len()),
            size: rng.random_range(0..vocab::SIZES.len()),
            material: rng.random_range(0..vocab::MATERIALS.len()),
            brand: rng.random_range(0..vocab::BRANDS.len()),
        };
        let title = make_title(&attrs, &v, &mut rng);
        let mut img_rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (image, truth_box) = draw_product(&attrs, image_side, &mut img_rng)?;
        out.push(ProductRecord {
            product_id: i as u32,
            category: attrs.category,
            attributes: attrs,
            title,
            image,
            truth_box,
        });
    }
    Ok(out)
}
