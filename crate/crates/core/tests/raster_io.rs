use image::{ImageBuffer, Luma, Rgb};
use interseg::error::Error;
use interseg::raster::{
    decode_image, encode_png, load_raster, resize_bilinear, resize_nearest, save_image, save_labels,
    sidecar_label_path, LabelMask, RasterImage,
};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

proptest! {
    #[test]
    fn eight_bit_png_round_trips(bytes in prop::collection::vec(any::<u8>(), 4 * 5 * 7), channels in prop::sample::select(vec![1usize, 3, 4])) {
        let pixels = Array3::from_shape_fn((channels, 5, 7), |(c, y, x)| f32::from(bytes[(c * 5 + y) * 7 + x]) / 255.0);
        let img = RasterImage::new(pixels.clone()).unwrap();
        let back = decode_image(&encode_png(&img).unwrap()).unwrap();
        prop_assert_eq!(back.pixels().to_owned(), pixels);
    }

    #[test]
    fn labels_round_trip_with_ignored_pixels(values in prop::collection::vec(0u8..4, 6 * 6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        // value 3 plays the unlabelled role for a three-class mask
        let labels = LabelMask::new(Array2::from_shape_vec((6, 6), values.clone()).unwrap(), 3).unwrap();
        let img = RasterImage::new(Array3::from_elem((3, 6, 6), 0.5)).unwrap();
        save_image(&img, &path).unwrap();
        save_labels(&labels, &sidecar_label_path(&path)).unwrap();
        let (_, loaded) = load_raster(&path, 3).unwrap();
        let loaded = loaded.unwrap();
        for (i, &v) in values.iter().enumerate() {
            let (y, x) = (i / 6, i % 6);
            prop_assert_eq!(loaded.get(y, x), (v < 3).then_some(v as usize));
        }
    }
}

#[test]
fn sixteen_bit_tiff_is_normalized() {
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_fn(4, 3, |x, y| Rgb([x as u16 * 1000, y as u16 * 2000, 65535]));
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb16(buf)
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Tiff)
        .unwrap();
    let img = decode_image(&bytes).unwrap();
    assert_eq!((img.channels(), img.height(), img.width()), (3, 3, 4));
    assert_eq!(img.pixels()[[0, 1, 3]], 3000.0 / 65535.0);
    assert_eq!(img.pixels()[[1, 2, 0]], 4000.0 / 65535.0);
    assert_eq!(img.pixels()[[2, 0, 0]], 1.0);
}

#[test]
fn sidecar_is_optional_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tile.png");
    save_image(&RasterImage::new(Array3::zeros((1, 4, 4))).unwrap(), &path).unwrap();
    assert_eq!(sidecar_label_path(&path), dir.path().join("tile_labels.png"));
    assert!(load_raster(&path, 2).unwrap().1.is_none());

    let bad: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(4, 4, |x, _| Luma([if x == 3 { 7 } else { 0 }]));
    bad.save(sidecar_label_path(&path)).unwrap();
    assert!(matches!(load_raster(&path, 2), Err(Error::LabelOutOfRange { value: 7, col: 3, .. })));

    let small: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(3, 4, Luma([0]));
    small.save(sidecar_label_path(&path)).unwrap();
    assert!(matches!(load_raster(&path, 2), Err(Error::Shape(_))));
}

#[test]
fn resizing_keeps_constants_and_identity() {
    let img = RasterImage::new(Array3::from_elem((2, 5, 9), 0.25)).unwrap();
    let up = resize_bilinear(&img, 13, 4).unwrap();
    assert!(up.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    let labels = LabelMask::new(Array2::from_shape_fn((5, 9), |(y, x)| ((y + x) % 2) as u8), 2).unwrap();
    assert_eq!(resize_nearest(&labels, 5, 9), labels);
    let doubled = resize_nearest(&labels, 10, 18);
    for y in 0..10 {
        for x in 0..18 {
            assert_eq!(doubled.get(y, x), labels.get(y / 2, x / 2));
        }
    }
}
