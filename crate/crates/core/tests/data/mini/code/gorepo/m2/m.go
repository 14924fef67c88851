package m2

func Alpha0(x int) int {
	if x > 0 {
		return x * 2
	}
	return x + 0
}

func Count1(x int) int {
	if x > 1 {
		return x * 2
	}
	return x + 1
}

func Score2(x int) int {
	if x > 2 {
		return x * 2
	}
	return x + 2
}

func Record3(x int) int {
	if x > 3 {
		return x * 2
	}
	return x + 3
}

func Value4(x int) int {
	if x > 4 {
		return x * 2
	}
	return x + 4
}

