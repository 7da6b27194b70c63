#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smmcl/tensor.hpp"

using namespace smmcl;
namespace fs = std::filesystem;

TEST_SUITE("tensor") {

TEST_CASE("construction checks dims against data") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({0, 3}), ShapeError);
  Tensor<double> t({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.at(1, 0) == 3);
}

TEST_CASE("matmul identities and hand arithmetic") {
  Tensor<double> i2 = Tensor<double>::identity(2);
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 2}, {5, 6, 7, 8});

  Tensor<double> ii = matmul(i2, i2);
  for (int k = 0; k < 4; ++k) CHECK(ii[k] == i2[k]);

  Tensor<double> ai = matmul(a, i2);
  for (int k = 0; k < 4; ++k) CHECK(ai[k] == a[k]);

  Tensor<double> ab = matmul(a, b);
  CHECK(ab[0] == 19);
  CHECK(ab[1] == 22);
  CHECK(ab[2] == 43);
  CHECK(ab[3] == 50);

  // (A*I)*B == A*B bitwise for exactly representable inputs
  Tensor<double> aib = matmul(matmul(a, i2), b);
  for (int k = 0; k < 4; ++k) CHECK(aib[k] == ab[k]);

  CHECK_THROWS_AS(matmul(a, Tensor<double>({3, 2})), ShapeError);
}

TEST_CASE("broadcasting add/mul over trailing dims") {
  Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> v({3}, {10, 20, 30});
  Tensor<double> s = add(x, v);
  CHECK(s.at(0, 0) == 11);
  CHECK(s.at(1, 2) == 36);
  Tensor<double> m = mul(x, v);
  CHECK(m.at(1, 1) == 100);

  Tensor<double> zero = Tensor<double>::zeros({2, 3});
  Tensor<double> same = add(x, zero);
  for (int k = 0; k < 6; ++k) CHECK(same[k] == x[k]);

  CHECK_THROWS_AS(add(x, Tensor<double>({4})), ShapeError);
}

TEST_CASE("reduce_to_shape sums over broadcast axes") {
  Tensor<double> g({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> r = reduce_to_shape(g, {3});
  CHECK(r[0] == 5);
  CHECK(r[1] == 7);
  CHECK(r[2] == 9);
  Tensor<double> r2 = reduce_to_shape(g, {2, 1});
  CHECK(r2[0] == 6);
  CHECK(r2[1] == 15);
}

TEST_CASE("tensor file format round trip both dtypes") {
  fs::path dir = fs::temp_directory_path() / "smmcl_tensor_test";
  fs::create_directories(dir);
  Tensor<double> t({2, 3, 2});
  for (long long i = 0; i < t.size(); ++i) t[i] = 0.125 * static_cast<double>(i) - 3;

  write_tensor(dir / "a.smt", t, Dtype::f64);
  Tensor<double> back = read_tensor<double>(dir / "a.smt");
  REQUIRE(back.dims() == t.dims());
  for (long long i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);

  Tensor<float> tf = t.cast<float>();
  write_tensor(dir / "b.smt", tf, Dtype::f32);
  Tensor<float> backf = read_tensor<float>(dir / "b.smt");
  for (long long i = 0; i < tf.size(); ++i) CHECK(backf[i] == tf[i]);

  fs::remove_all(dir);
}

TEST_CASE("corrupt tensor files raise format errors") {
  fs::path dir = fs::temp_directory_path() / "smmcl_tensor_bad";
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "bad.smt", std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(read_tensor<double>(dir / "bad.smt"), FormatError);
  {
    Tensor<double> t({4, 4});
    write_tensor(dir / "trunc.smt", t, Dtype::f64);
    fs::resize_file(dir / "trunc.smt", 20);
  }
  CHECK_THROWS_AS(read_tensor<double>(dir / "trunc.smt"), FormatError);
  CHECK_THROWS_AS(read_tensor<double>(dir / "missing.smt"), IoError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
