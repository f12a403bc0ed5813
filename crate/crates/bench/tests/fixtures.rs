use wmoe_bench::{desk_model, random_tensor, samples};

#[test]
fn fixtures_are_deterministic_and_shaped_for_the_desk_model() {
    let t = random_tensor(&[4, 5, 6], 9);
    assert_eq!(t.shape(), &[4, 5, 6]);
    assert_eq!(t, random_tensor(&[4, 5, 6], 9));
    assert!(t.data().iter().all(|v| v.abs() <= 1.0));

    let s = samples(1, 4, 2);
    assert_eq!(s.len(), 4);
    assert!(s.iter().all(|x| x.pixels.shape() == [64, 64]));

    let (model, examples) = desk_model(2);
    assert_eq!(examples.len(), 2);
    assert!(model.score(&examples[0].prepared).unwrap().raw.is_finite());
}
