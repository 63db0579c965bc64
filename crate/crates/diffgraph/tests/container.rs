use diffgraph::{ParameterSet, Tensor};
use proptest::prelude::*;

fn any_param() -> impl Strategy<Value = (String, Vec<usize>, Vec<f64>)> {
    ("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n: usize = shape.iter().product();
        let bits = prop::collection::vec(any::<u64>(), n);
        (Just(name), Just(shape), bits.prop_map(|b| b.into_iter().map(f64::from_bits).collect()))
    })
}

proptest! {
    #[test]
    fn elp1_round_trip_preserves_every_bit(params in prop::collection::vec(any_param(), 0..6)) {
        let mut set = ParameterSet::new();
        for (name, shape, data) in params {
            let _ = set.insert(name, Tensor::new(&shape, data).unwrap(), true);
        }
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = ParameterSet::read_from(buf.as_slice(), true).unwrap();
        prop_assert!(set.bit_eq(&back));
    }
}
