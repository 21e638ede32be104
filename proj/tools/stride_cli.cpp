#include <cstdio>

int main() {
  std::puts("stride cli placeholder");
  return 0;
}
