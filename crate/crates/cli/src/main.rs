fn main() { println!("{}", isoperc::lattice::placeholder()); }
